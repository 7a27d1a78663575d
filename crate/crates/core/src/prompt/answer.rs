//! Canonical answer strings for grounding and multiple-choice tasks.

use std::sync::OnceLock;

use regex::Regex;

use crate::scene::BBox3D;

fn fmt2(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}

/// `obj_<id> [cx, cy, cz, l, w, h]` with two decimals per value.
pub fn format_grounding_answer(object_id: u32, bbox: &BBox3D) -> String {
    let values: Vec<String> = bbox.center.iter().chain(&bbox.extents).map(|&v| fmt2(v)).collect();
    format!("obj_{object_id} [{}]", values.join(", "))
}

fn object_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"obj_(\d+)").expect("valid regex"))
}

fn bracket_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([^\[\]]*)\]").expect("valid regex"))
}

fn choice_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b([abcd])\b").expect("valid regex"))
}

/// First `obj_<int>` and first bracketed group of exactly six numbers.
///
/// Never fails; missing or malformed parts come back as `None`. A box with a
/// negative extent is treated as malformed.
pub fn parse_grounding_answer(text: &str) -> (Option<u32>, Option<BBox3D>) {
    let id = object_re()
        .captures(text)
        .and_then(|c| c[1].parse::<u32>().ok());
    let bbox = bracket_re().captures_iter(text).find_map(|c| {
        let nums: Option<Vec<f64>> = c[1]
            .split(',')
            .map(|p| p.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        match nums {
            Some(v) if v.len() == 6 && v[3..].iter().all(|&e| e >= 0.0) => {
                Some(BBox3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]))
            }
            _ => None,
        }
    });
    (id, bbox)
}

/// First standalone letter A–D, case-insensitive.
pub fn parse_choice(text: &str) -> Option<char> {
    choice_re()
        .captures(text)
        .and_then(|c| c[1].chars().next())
        .map(|c| c.to_ascii_uppercase())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::iou_3d;
    use proptest::prelude::*;

    #[test]
    fn formats_canonically() {
        let b = BBox3D::new([1.0, 1.0, 0.5], [0.5, 0.5, 1.0]);
        assert_eq!(format_grounding_answer(3, &b), "obj_3 [1.00, 1.00, 0.50, 0.50, 0.50, 1.00]");
        let b = BBox3D::new([-1.0, 0.0, -0.001], [1.0, 1.0, 1.0]);
        assert_eq!(format_grounding_answer(0, &b), "obj_0 [-1.00, 0.00, 0.00, 1.00, 1.00, 1.00]");
    }

    #[test]
    fn parses_embedded_answers() {
        let (id, b) = parse_grounding_answer("The answer is obj_3 [1.00, 1.00, 0.50, 0.50, 0.50, 1.00].");
        assert_eq!(id, Some(3));
        assert_eq!(b, Some(BBox3D::new([1.0, 1.0, 0.5], [0.5, 0.5, 1.0])));
        assert_eq!(parse_grounding_answer("I cannot find it"), (None, None));
        assert_eq!(parse_grounding_answer("obj_2 [1, 2, 3, 4, 5]"), (Some(2), None));
        let (_, b) = parse_grounding_answer("[1, 2] then [0, 0, 0, 1, 1, 1]");
        assert_eq!(b, Some(BBox3D::new([0.0; 3], [1.0; 3])));
    }

    #[test]
    fn choices() {
        assert_eq!(parse_choice("B"), Some('B'));
        assert_eq!(parse_choice("The answer is (c)."), Some('C'));
        assert_eq!(parse_choice("Both are brown."), None);
    }

    /// Worst-case IoU after rounding center and extents to 0.01: every face
    /// moves by at most 0.0075, so each overlap shrinks and the hull grows by
    /// at most 0.015 per axis.
    fn quantization_bound(e: [f64; 3]) -> f64 {
        e.iter().map(|&x| (x - 0.015) / (x + 0.015)).product()
    }

    #[test]
    fn quantization_bound_is_attained_up_to_rounding() {
        // Center and extents both land halfway between grid values.
        let gt = BBox3D::new([0.005; 3], [0.105; 3]);
        let (_, pb) = parse_grounding_answer(&format_grounding_answer(0, &gt));
        let iou = iou_3d(&pb.unwrap(), &gt);
        assert!(iou < 0.99, "thin boxes cannot meet 0.99 after rounding: {iou}");
        assert!(iou >= quantization_bound([0.105; 3]) - 1e-12);
    }

    proptest! {
        #[test]
        fn grounding_round_trip_survives_quantization(
            c in prop::array::uniform3(-10.0f64..10.0),
            e in prop::array::uniform3(0.1f64..5.0),
            id in 0u32..500,
        ) {
            let gt = BBox3D::new(c, e);
            let (pid, pb) = parse_grounding_answer(&format_grounding_answer(id, &gt));
            prop_assert_eq!(pid, Some(id));
            let iou = iou_3d(&pb.unwrap(), &gt);
            prop_assert!(iou >= quantization_bound(e) - 1e-12);
        }

        #[test]
        fn centimetre_grid_boxes_round_trip_exactly(
            c in prop::array::uniform3(-1000i32..1000),
            e in prop::array::uniform3(10i32..500),
        ) {
            let gt = BBox3D::new(c.map(|v| v as f64 / 100.0), e.map(|v| v as f64 / 100.0));
            let (_, pb) = parse_grounding_answer(&format_grounding_answer(1, &gt));
            prop_assert!(iou_3d(&pb.unwrap(), &gt) >= 0.99);
        }
    }
}
