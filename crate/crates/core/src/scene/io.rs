//! JSON and ASCII PLY scene files.
//!
//! JSON: `{"scene_id", "points": [[x,y,z,r,g,b],...], "labels": [...], "classes": {"0": "chair"}}`
//! with 0–255 integer colors. PLY: a `vertex` element with x, y, z, red, green,
//! blue and an integer `object_id`; scene id and class names travel in
//! `comment scene_id <id>` and `comment class <id> <name>` header lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

use super::{Point, ScenePointCloud};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneFormat {
    PlyAscii,
    Json,
}

impl SceneFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "ply" => Some(Self::PlyAscii),
            "json" => Some(Self::Json),
            _ => None,
        }
    }
}

pub fn load_scene(path: &Path, format: SceneFormat) -> Result<ScenePointCloud> {
    let text = std::fs::read_to_string(path)?;
    let default_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("scene")
        .to_string();
    let scene = match format {
        SceneFormat::Json => parse_json(&text, path)?,
        SceneFormat::PlyAscii => parse_ply(&text, path, default_id)?,
    };
    scene
        .validate()
        .map_err(|e| Error::parse(path, "scene", e.to_string()))?;
    Ok(scene)
}

fn color_byte(v: &Value, path: &Path, location: &str) -> Result<f64> {
    let c = v
        .as_f64()
        .ok_or_else(|| Error::parse(path, location, "non-numeric color"))?;
    if !(0.0..=255.0).contains(&c) {
        return Err(Error::parse(path, location, format!("color {c} outside 0..=255")));
    }
    Ok(c / 255.0)
}

fn parse_json(text: &str, path: &Path) -> Result<ScenePointCloud> {
    let doc: Value = serde_json::from_str(text).map_err(|e| {
        Error::parse(path, format!("line {} column {}", e.line(), e.column()), e.to_string())
    })?;
    let scene_id = doc
        .get("scene_id")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::parse(path, "scene_id", "missing string field"))?
        .to_string();
    let rows = doc
        .get("points")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::parse(path, "points", "missing array field"))?;
    let mut points = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let loc = format!("points[{i}]");
        let vals = row
            .as_array()
            .filter(|a| a.len() == 6)
            .ok_or_else(|| Error::parse(path, &loc, "expected [x, y, z, r, g, b]"))?;
        let mut xyz = [0.0; 3];
        for k in 0..3 {
            xyz[k] = vals[k]
                .as_f64()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(path, &loc, "non-numeric coordinate"))?;
        }
        let mut rgb = [0.0; 3];
        for k in 0..3 {
            rgb[k] = color_byte(&vals[3 + k], path, &loc)?;
        }
        points.push(Point { xyz, rgb });
    }
    let labels = match doc.get("labels") {
        None => vec![-1; points.len()],
        Some(v) => v
            .as_array()
            .ok_or_else(|| Error::parse(path, "labels", "expected an array"))?
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.as_i64()
                    .ok_or_else(|| Error::parse(path, format!("labels[{i}]"), "non-integer label"))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    if labels.len() != points.len() {
        return Err(Error::parse(
            path,
            "labels",
            format!("{} labels for {} points", labels.len(), points.len()),
        ));
    }
    let mut classes = BTreeMap::new();
    if let Some(map) = doc.get("classes").and_then(Value::as_object) {
        for (k, v) in map {
            let id: i64 = k
                .parse()
                .map_err(|_| Error::parse(path, format!("classes.{k}"), "non-integer class key"))?;
            let name = v
                .as_str()
                .ok_or_else(|| Error::parse(path, format!("classes.{k}"), "class name must be a string"))?;
            classes.insert(id, name.to_string());
        }
    }
    Ok(ScenePointCloud {
        scene_id,
        points,
        labels,
        classes,
    })
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<(String, String)>,
}

fn parse_ply(text: &str, path: &Path, default_id: String) -> Result<ScenePointCloud> {
    let mut lines = text.lines().enumerate();
    let line_loc = |n: usize| format!("line {}", n + 1);

    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(Error::parse(path, "line 1", "missing 'ply' magic")),
    }
    let mut scene_id = default_id;
    let mut classes = BTreeMap::new();
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    loop {
        let Some((n, line)) = lines.next() else {
            return Err(Error::parse(path, "header", "missing end_header"));
        };
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                if words.next() != Some("ascii") {
                    return Err(Error::parse(path, line_loc(n), "only ascii PLY is supported"));
                }
                saw_format = true;
            }
            Some("comment") => match words.next() {
                Some("scene_id") => {
                    if let Some(id) = words.next() {
                        scene_id = id.to_string();
                    }
                }
                Some("class") => {
                    let id = words.next().and_then(|w| w.parse::<i64>().ok());
                    let name: Vec<&str> = words.collect();
                    match id {
                        Some(id) if !name.is_empty() => {
                            classes.insert(id, name.join(" "));
                        }
                        _ => return Err(Error::parse(path, line_loc(n), "malformed class comment")),
                    }
                }
                _ => {}
            },
            Some("obj_info") | None => {}
            Some("element") => {
                let name = words.next();
                let count = words.next().and_then(|w| w.parse::<usize>().ok());
                match (name, count) {
                    (Some(name), Some(count)) => elements.push(PlyElement {
                        name: name.to_string(),
                        count,
                        properties: Vec::new(),
                    }),
                    _ => return Err(Error::parse(path, line_loc(n), "malformed element line")),
                }
            }
            Some("property") => {
                let Some(el) = elements.last_mut() else {
                    return Err(Error::parse(path, line_loc(n), "property before any element"));
                };
                let parts: Vec<&str> = words.collect();
                match parts.as_slice() {
                    ["list", ..] => el.properties.push(("list".into(), parts.last().unwrap().to_string())),
                    [ty, name] => el.properties.push((ty.to_string(), name.to_string())),
                    _ => return Err(Error::parse(path, line_loc(n), "malformed property line")),
                }
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(Error::parse(path, line_loc(n), format!("unknown header keyword '{other}'")))
            }
        }
    }
    if !saw_format {
        return Err(Error::parse(path, "header", "missing format line"));
    }

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut found_vertex = false;
    for el in &elements {
        if el.name != "vertex" {
            for _ in 0..el.count {
                if lines.next().is_none() {
                    return Err(Error::parse(path, "body", format!("truncated '{}' element", el.name)));
                }
            }
            continue;
        }
        found_vertex = true;
        let col = |name: &str| el.properties.iter().position(|(_, p)| p == name);
        let required = ["x", "y", "z", "red", "green", "blue", "object_id"];
        let mut idx = [0usize; 7];
        for (slot, name) in idx.iter_mut().zip(required) {
            *slot = col(name).ok_or_else(|| {
                Error::parse(path, "header", format!("vertex element lacks property '{name}'"))
            })?;
        }
        let float_color = matches!(el.properties[idx[3]].0.as_str(), "float" | "float32" | "double" | "float64");
        for _ in 0..el.count {
            let Some((n, line)) = lines.next() else {
                return Err(Error::parse(path, "body", "fewer vertices than declared"));
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < el.properties.len() {
                return Err(Error::parse(path, line_loc(n), "too few vertex fields"));
            }
            let num = |k: usize, what: &str| -> Result<f64> {
                fields[idx[k]]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::parse(path, line_loc(n), format!("non-numeric {what}")))
            };
            let xyz = [num(0, "coordinate")?, num(1, "coordinate")?, num(2, "coordinate")?];
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                let v = num(3 + c, "color")?;
                rgb[c] = if float_color {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::parse(path, line_loc(n), format!("color {v} outside [0, 1]")));
                    }
                    v
                } else {
                    if !(0.0..=255.0).contains(&v) {
                        return Err(Error::parse(path, line_loc(n), format!("color {v} outside 0..=255")));
                    }
                    v / 255.0
                };
            }
            let label = fields[idx[6]]
                .parse::<i64>()
                .map_err(|_| Error::parse(path, line_loc(n), "non-integer object_id"))?;
            points.push(Point { xyz, rgb });
            labels.push(label);
        }
    }
    if !found_vertex {
        return Err(Error::parse(path, "header", "no vertex element"));
    }
    Ok(ScenePointCloud {
        scene_id,
        points,
        labels,
        classes,
    })
}

fn byte(c: f64) -> i64 {
    (c * 255.0).round() as i64
}

pub fn scene_to_json(scene: &ScenePointCloud) -> String {
    let points: Vec<Value> = scene
        .points
        .iter()
        .map(|p| {
            Value::Array(vec![
                p.xyz[0].into(),
                p.xyz[1].into(),
                p.xyz[2].into(),
                byte(p.rgb[0]).into(),
                byte(p.rgb[1]).into(),
                byte(p.rgb[2]).into(),
            ])
        })
        .collect();
    let classes: serde_json::Map<String, Value> = scene
        .classes
        .iter()
        .map(|(k, v)| (k.to_string(), Value::String(v.clone())))
        .collect();
    let doc = serde_json::json!({
        "scene_id": scene.scene_id,
        "points": points,
        "labels": scene.labels,
        "classes": classes,
    });
    doc.to_string()
}

fn scene_to_ply(scene: &ScenePointCloud) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "comment scene_id {}", scene.scene_id);
    for (id, name) in &scene.classes {
        let _ = writeln!(out, "comment class {id} {name}");
    }
    let _ = writeln!(out, "element vertex {}", scene.points.len());
    for p in ["float x", "float y", "float z", "uchar red", "uchar green", "uchar blue", "int object_id"] {
        let _ = writeln!(out, "property {p}");
    }
    out.push_str("end_header\n");
    for (p, l) in scene.points.iter().zip(&scene.labels) {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {}",
            p.xyz[0],
            p.xyz[1],
            p.xyz[2],
            byte(p.rgb[0]),
            byte(p.rgb[1]),
            byte(p.rgb[2]),
            l
        );
    }
    out
}

pub fn save_scene(scene: &ScenePointCloud, path: &Path, format: SceneFormat) -> Result<()> {
    let text = match format {
        SceneFormat::Json => scene_to_json(scene),
        SceneFormat::PlyAscii => scene_to_ply(scene),
    };
    std::fs::write(path, text)?;
    Ok(())
}
