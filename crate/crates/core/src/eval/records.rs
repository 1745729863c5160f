//! Plain-text detection records, one box per line:
//!
//! ```text
//! # frame <id>
//! <class> <score> <cx> <cy> <cz> <l> <w> <h> <yaw>
//! ```
//!
//! Coordinates are ego-frame meters, yaw in radians. Numbers use the shortest
//! representation that parses back to the same `f64`.

use crate::detection::Box3D;
use crate::error::{Error, Result};

pub fn format_detections(frame_id: &str, boxes: &[Box3D], class_names: &[String]) -> Result<String> {
    let mut out = format!("# frame {frame_id}\n");
    for b in boxes {
        let name = class_names.get(b.class_id).ok_or_else(|| Error::InvalidInput(format!("class id {} out of range", b.class_id)))?;
        let [x, y, z] = b.center;
        let [l, w, h] = b.dims;
        out.push_str(&format!("{name} {} {x} {y} {z} {l} {w} {h} {}\n", b.score, b.yaw));
    }
    Ok(out)
}

pub fn parse_detections(text: &str, class_names: &[String]) -> Result<(String, Vec<Box3D>)> {
    let mut frame = String::new();
    let mut boxes = Vec::new();
    let err = |frame: &str, line: usize, detail: String| Error::Parse { frame: frame.to_string(), field: format!("detection line {line}"), detail };
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(id) = rest.trim().strip_prefix("frame") {
                frame = id.trim().to_string();
            }
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 9 {
            return Err(err(&frame, i + 1, format!("expected 9 fields, found {}", f.len())));
        }
        let class_id = class_names.iter().position(|c| c == f[0]).ok_or_else(|| err(&frame, i + 1, format!("unknown class `{}`", f[0])))?;
        let mut v = [0.0; 8];
        for (k, s) in f[1..].iter().enumerate() {
            v[k] = s.parse().map_err(|_| err(&frame, i + 1, format!("`{s}` is not a number")))?;
        }
        boxes.push(Box3D { center: [v[1], v[2], v[3]], dims: [v[4], v[5], v[6]], yaw: v[7], class_id, score: v[0] });
    }
    Ok((frame, boxes))
}
