//! Pascal VOC XML annotations, the format the PKU PCB dataset ships in.

use std::collections::BTreeMap;

use roxmltree::{Document, Node};

use super::{BBox, DefectClass, Labeled};
use crate::error::{Error, Result};

/// Maps annotation label strings onto defect classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMap {
    names: BTreeMap<String, DefectClass>,
}

impl Default for ClassMap {
    /// The six canonical dataset label names.
    fn default() -> Self {
        ClassMap {
            names: DefectClass::ALL
                .iter()
                .map(|c| (c.name().to_owned(), *c))
                .collect(),
        }
    }
}

impl ClassMap {
    pub fn empty() -> Self {
        ClassMap {
            names: BTreeMap::new(),
        }
    }

    pub fn with_alias(mut self, name: impl Into<String>, class: DefectClass) -> Self {
        self.names.insert(name.into(), class);
        self
    }

    pub fn lookup(&self, name: &str) -> Result<DefectClass> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownClass(name.to_owned()))
    }
}

/// Metadata of one VOC annotation file.
#[derive(Clone, Debug, PartialEq)]
pub struct VocAnnotation {
    pub filename: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<Labeled>,
}

fn child<'a, 'i>(node: Node<'a, 'i>, name: &str) -> Option<Node<'a, 'i>> {
    node.children().find(|n| n.has_tag_name(name))
}

fn text_of(node: Node, path: &[&str]) -> Result<String> {
    let mut cur = node;
    for part in path {
        cur = child(cur, part)
            .ok_or_else(|| Error::Annotation(format!("missing <{}>", path.join("/"))))?;
    }
    Ok(cur.text().unwrap_or("").trim().to_owned())
}

fn number(node: Node, path: &[&str]) -> Result<f64> {
    let s = text_of(node, path)?;
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Annotation(format!("<{}> is not a number: {s:?}", path.join("/"))))
}

pub fn parse_voc_annotation(xml: &str, classes: &ClassMap) -> Result<VocAnnotation> {
    let doc = Document::parse(xml).map_err(|e| {
        let pos = e.pos();
        Error::Xml {
            line: pos.row,
            column: pos.col,
            message: e.to_string(),
        }
    })?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(Error::Annotation(format!(
            "root element is <{}>, expected <annotation>",
            root.tag_name().name()
        )));
    }
    let filename = child(root, "filename")
        .and_then(|n| n.text())
        .unwrap_or("")
        .trim()
        .to_owned();
    let dim = |name: &str| -> Result<u32> {
        let v = number(root, &["size", name])?;
        if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
            Ok(v as u32)
        } else {
            Err(Error::Annotation(format!("image {name} must be a positive integer, got {v}")))
        }
    };
    let (width, height) = (dim("width")?, dim("height")?);

    let mut objects = Vec::new();
    for obj in root.children().filter(|n| n.has_tag_name("object")) {
        let name = text_of(obj, &["name"])?;
        let class = classes.lookup(&name)?;
        let bb = child(obj, "bndbox").ok_or_else(|| Error::Annotation("object without <bndbox>".into()))?;
        let coord = |k: &str| number(bb, &[k]);
        let bbox = BBox {
            xmin: coord("xmin")?,
            ymin: coord("ymin")?,
            xmax: coord("xmax")?,
            ymax: coord("ymax")?,
        };
        bbox.validate()?;
        if !bbox.within(width as f64, height as f64) {
            return Err(Error::Validation(format!(
                "{bbox:?} exceeds image size {width}x{height}"
            )));
        }
        objects.push(Labeled { bbox, class });
    }
    Ok(VocAnnotation {
        filename,
        width,
        height,
        objects,
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders an annotation as VOC XML. Coordinates use the shortest
/// representation that parses back to the same `f64`.
pub fn write_voc_annotation(ann: &VocAnnotation) -> String {
    let mut s = String::new();
    s.push_str("<annotation>\n");
    s.push_str(&format!("  <filename>{}</filename>\n", escape(&ann.filename)));
    s.push_str(&format!(
        "  <size>\n    <width>{}</width>\n    <height>{}</height>\n    <depth>3</depth>\n  </size>\n",
        ann.width, ann.height
    ));
    for o in &ann.objects {
        s.push_str("  <object>\n");
        s.push_str(&format!("    <name>{}</name>\n", o.class.name()));
        s.push_str("    <pose>Unspecified</pose>\n    <truncated>0</truncated>\n    <difficult>0</difficult>\n");
        s.push_str(&format!(
            "    <bndbox>\n      <xmin>{}</xmin>\n      <ymin>{}</ymin>\n      <xmax>{}</xmax>\n      <ymax>{}</ymax>\n    </bndbox>\n",
            o.bbox.xmin, o.bbox.ymin, o.bbox.xmax, o.bbox.ymax
        ));
        s.push_str("  </object>\n");
    }
    s.push_str("</annotation>\n");
    s
}
