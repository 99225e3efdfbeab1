//! Deterministic utterance text for a detection set: the auditory-feedback
//! stand-in, rendered from the pill catalog.

use crate::dataset::PillRecord;
use crate::error::{Error, Result};
use crate::postprocess::{sort_detections, Detection};

pub const DEFAULT_MAX_ITEMS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub text: String,
    pub item_count: usize,
}

/// Renders the top `max_items` detections (descending score) as
/// "<shape> <color> pill, class <id>, <ingredient>, confidence <P> percent",
/// joined with "; ". An empty detection set reads "No pills detected.".
pub fn announce(
    dets: &[Detection],
    catalog: &[PillRecord],
    max_items: usize,
) -> Result<Utterance> {
    if dets.is_empty() {
        return Ok(Utterance {
            text: "No pills detected.".into(),
            item_count: 0,
        });
    }
    let mut indexed: Vec<(usize, Detection)> = dets.iter().cloned().enumerate().collect();
    sort_detections(&mut indexed);
    let mut parts = Vec::new();
    for (_, d) in indexed.into_iter().take(max_items) {
        let record = catalog
            .iter()
            .find(|r| r.class_id == d.class_id)
            .ok_or(Error::UnknownClass(d.class_id))?;
        parts.push(format!(
            "{} {} pill, class {}, {}, confidence {} percent",
            record.shape.name(),
            record.color_name,
            record.class_id,
            record.active_ingredient,
            (d.score * 100.0).round() as i64,
        ));
    }
    Ok(Utterance {
        item_count: parts.len(),
        text: parts.join("; "),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_catalog;

    fn det(class_id: usize, score: f64) -> Detection {
        Detection {
            class_id,
            score,
            bbox: (0.0, 0.0, 10.0, 10.0),
        }
    }

    #[test]
    fn empty_set() {
        let catalog = make_catalog(4, 0).unwrap();
        let u = announce(&[], &catalog, DEFAULT_MAX_ITEMS).unwrap();
        assert_eq!(u.text, "No pills detected.");
        assert_eq!(u.item_count, 0);
    }

    #[test]
    fn confidence_rounding() {
        let catalog = make_catalog(8, 0).unwrap();
        let u = announce(&[det(4, 0.981)], &catalog, DEFAULT_MAX_ITEMS).unwrap();
        assert_eq!(u.item_count, 1);
        assert!(u.text.contains("class 4"), "{}", u.text);
        assert!(u.text.ends_with("confidence 98 percent"), "{}", u.text);
        let r = &catalog[4];
        assert!(u
            .text
            .starts_with(&format!("{} {} pill", r.shape.name(), r.color_name)));
        assert!(u.text.contains(&r.active_ingredient));
    }

    #[test]
    fn truncates_to_max_items_highest_first() {
        let catalog = make_catalog(8, 0).unwrap();
        let dets = [det(0, 0.5), det(1, 0.9), det(2, 0.7), det(3, 0.8), det(4, 0.6)];
        let u = announce(&dets, &catalog, 3).unwrap();
        assert_eq!(u.item_count, 3);
        let classes: Vec<&str> = u.text.matches("class ").collect();
        assert_eq!(classes.len(), 3);
        let pos = |c: &str| u.text.find(c).unwrap();
        assert!(pos("class 1") < pos("class 3"));
        assert!(pos("class 3") < pos("class 2"));
        assert_eq!(u.text.matches("; ").count(), 2);
    }

    #[test]
    fn unknown_class_named_in_error() {
        let catalog = make_catalog(2, 0).unwrap();
        let err = announce(&[det(9, 0.8)], &catalog, 3).unwrap_err();
        assert!(err.to_string().contains('9'), "{err}");
    }

    #[test]
    fn deterministic_bytes() {
        let catalog = make_catalog(8, 0).unwrap();
        let dets = [det(2, 0.7), det(5, 0.7)];
        let a = announce(&dets, &catalog, 3).unwrap();
        let b = announce(&dets, &catalog, 3).unwrap();
        assert_eq!(a, b);
        // equal scores: lower class id announced first
        assert!(a.text.find("class 2").unwrap() < a.text.find("class 5").unwrap());
    }
}
