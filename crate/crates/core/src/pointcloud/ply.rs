//! ASCII PLY import/export restricted to vertex positions and float colors.

use std::fmt::Write as _;

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

struct Element {
    name: String,
    count: usize,
    properties: Vec<String>,
}

const SCALAR_TYPES: &[&str] = &[
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double", "int8", "uint8",
    "int16", "uint16", "int32", "uint32", "float32", "float64",
];

fn parse_header<'a>(lines: &mut impl Iterator<Item = &'a str>) -> Result<Vec<Element>> {
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::Format("missing 'ply' signature".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let line = lines
            .next()
            .ok_or_else(|| Error::Format("header has no end_header".into()))?
            .trim();
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                if words.next() != Some("ascii") {
                    return Err(Error::Format(format!("unsupported format line '{line}'")));
                }
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = words.next().ok_or_else(|| Error::Format(line.into()))?;
                let count = words
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad element count in '{line}'")))?;
                elements.push(Element {
                    name: name.into(),
                    count,
                    properties: vec![],
                });
            }
            Some("property") => {
                let elem = elements
                    .last_mut()
                    .ok_or_else(|| Error::Format("property before element".into()))?;
                let ty = words.next().ok_or_else(|| Error::Format(line.into()))?;
                if ty == "list" {
                    return Err(Error::Format("list properties are not supported".into()));
                }
                if !SCALAR_TYPES.contains(&ty) {
                    return Err(Error::Format(format!("unknown property type '{ty}'")));
                }
                let name = words.next().ok_or_else(|| Error::Format(line.into()))?;
                elem.properties.push(name.into());
            }
            Some("end_header") => return Ok(elements),
            Some(other) => return Err(Error::Format(format!("unexpected header keyword '{other}'"))),
        }
    }
}

fn position(props: &[String], names: &[&str]) -> Option<usize> {
    props.iter().position(|p| names.contains(&p.as_str()))
}

pub fn load_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines();
    let elements = parse_header(&mut lines)?;
    let mut data = lines.filter(|l| !l.trim().is_empty());

    let mut cloud = None;
    for elem in &elements {
        if elem.name != "vertex" {
            for i in 0..elem.count {
                data.next().ok_or_else(|| {
                    Error::Length(format!("element '{}' ends after {i} rows", elem.name))
                })?;
            }
            continue;
        }
        let props = &elem.properties;
        let axes = ["x", "y", "z"].map(|n| position(props, &[n]));
        let [Some(ix), Some(iy), Some(iz)] = axes else {
            return Err(Error::Format("vertex element lacks x/y/z".into()));
        };
        let rgb = [
            position(props, &["r", "red"]),
            position(props, &["g", "green"]),
            position(props, &["b", "blue"]),
        ];
        let has_color = match rgb {
            [Some(_), Some(_), Some(_)] => true,
            [None, None, None] => false,
            _ => return Err(Error::Format("partial color properties".into())),
        };

        let mut positions = Vec::with_capacity(elem.count.min(1 << 20));
        let mut colors: Vec<Point3> = Vec::new();
        for i in 0..elem.count {
            let line = data.next().ok_or_else(|| {
                Error::Length(format!("declared {} vertices, found {i}", elem.count))
            })?;
            let values: Vec<f32> = line
                .split_whitespace()
                .map(|w| w.parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("vertex {i}: {e}")))?;
            if values.len() != props.len() {
                return Err(Error::Format(format!(
                    "vertex {i} has {} values, header declares {}",
                    values.len(),
                    props.len()
                )));
            }
            positions.push([values[ix] as f64, values[iy] as f64, values[iz] as f64]);
            if has_color {
                colors.push(rgb.map(|c| values[c.unwrap()] as f64));
            }
        }
        cloud = Some(PointCloud::new(positions, has_color.then_some(colors))?);
    }
    if data.next().is_some() {
        return Err(Error::Length("more data rows than the header declares".into()));
    }
    cloud.ok_or_else(|| Error::Format("no vertex element".into()))
}

/// Writes positions (and colors) as 32-bit floats.
pub fn save_ply(cloud: &PointCloud) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    for p in ["x", "y", "z"] {
        let _ = writeln!(out, "property float {p}");
    }
    if cloud.has_colors() {
        for p in ["r", "g", "b"] {
            let _ = writeln!(out, "property float {p}");
        }
    }
    out.push_str("end_header\n");
    for (i, p) in cloud.positions.iter().enumerate() {
        let _ = write!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
        if let Some(c) = &cloud.colors {
            let _ = write!(out, " {} {} {}", c[i][0] as f32, c[i][1] as f32, c[i][2] as f32);
        }
        out.push('\n');
    }
    out
}
