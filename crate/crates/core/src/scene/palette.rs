//! Closed vocabularies of object classes and color names.

/// A named display color with its 0–255 encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NamedColor {
    pub name: &'static str,
    pub rgb: [u8; 3],
}

pub const COLORS: [NamedColor; 12] = [
    NamedColor { name: "red", rgb: [200, 30, 30] },
    NamedColor { name: "green", rgb: [40, 160, 60] },
    NamedColor { name: "blue", rgb: [40, 70, 200] },
    NamedColor { name: "yellow", rgb: [230, 210, 40] },
    NamedColor { name: "brown", rgb: [130, 80, 40] },
    NamedColor { name: "white", rgb: [240, 240, 240] },
    NamedColor { name: "black", rgb: [20, 20, 20] },
    NamedColor { name: "gray", rgb: [128, 128, 128] },
    NamedColor { name: "orange", rgb: [240, 140, 30] },
    NamedColor { name: "purple", rgb: [130, 50, 160] },
    NamedColor { name: "pink", rgb: [240, 150, 190] },
    NamedColor { name: "beige", rgb: [220, 200, 160] },
];

/// The 20 fixture classes and the index of each one's color in [`COLORS`].
pub const CLASSES: [(&str, usize); 20] = [
    ("chair", 0),
    ("table", 4),
    ("sofa", 2),
    ("bed", 5),
    ("desk", 7),
    ("cabinet", 8),
    ("bookshelf", 3),
    ("lamp", 6),
    ("door", 1),
    ("window", 9),
    ("toilet", 5),
    ("sink", 7),
    ("bathtub", 10),
    ("refrigerator", 5),
    ("curtain", 9),
    ("counter", 11),
    ("pillow", 10),
    ("monitor", 6),
    ("box", 11),
    ("bench", 4),
];

pub fn class_color(class_index: usize) -> NamedColor {
    COLORS[CLASSES[class_index].1]
}

/// Name of the palette color closest (Euclidean, 0–1 space) to `rgb`.
pub fn nearest_color_name(rgb: [f64; 3]) -> &'static str {
    COLORS
        .iter()
        .map(|c| {
            let d: f64 = (0..3)
                .map(|i| {
                    let e = c.rgb[i] as f64 / 255.0 - rgb[i];
                    e * e
                })
                .sum();
            (d, c.name)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, n)| n)
        .expect("palette is non-empty")
}

/// English plural of a class noun.
pub fn plural(noun: &str) -> String {
    if let Some(stem) = noun.strip_suffix('f') {
        format!("{stem}ves")
    } else if ["x", "ch", "sh", "s"].iter().any(|s| noun.ends_with(s)) {
        format!("{noun}es")
    } else {
        format!("{noun}s")
    }
}
