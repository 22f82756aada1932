//! VOC-style XML annotations and dataset directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use quick_xml::events::Event;
use quick_xml::Reader;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EvalSample, ImageSource, Selection, Skipped};
use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::scalar::Scalar;

/// One annotated object, with its box in half-open 0-based pixel coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub filename: String,
    pub class_name: String,
    pub bbox: Region,
    pub image_dims: (u32, u32),
}

#[derive(Default)]
struct ObjectFields {
    name: Option<String>,
    xmin: Option<String>,
    ymin: Option<String>,
    xmax: Option<String>,
    ymax: Option<String>,
}

/// Parses every `<object>` of a VOC annotation. VOC boxes are 1-based and
/// inclusive; `(xmin, ymin, xmax, ymax)` becomes
/// `(xmin - 1, ymin - 1, xmax - xmin + 1, ymax - ymin + 1)`, clamped to the
/// declared image size.
pub fn parse_annotation(xml: &[u8]) -> Result<Vec<Annotation>> {
    let mut reader = Reader::from_reader(xml);
    reader.config_mut().trim_text(true);

    let mut path: Vec<String> = Vec::new();
    let mut filename = String::new();
    let mut width = None;
    let mut height = None;
    let mut objects: Vec<ObjectFields> = Vec::new();
    let mut text = String::new();

    loop {
        let event = reader.read_event().map_err(|e| Error::Parse {
            offset: reader.error_position(),
            message: e.to_string(),
        })?;
        match event {
            Event::Start(start) => {
                let name = start.name().as_ref().to_string();
                if path.len() == 1 && name == "object" {
                    objects.push(ObjectFields::default());
                }
                path.push(name);
                text.clear();
            }
            Event::Text(t) => text.push_str(&t),
            Event::GeneralRef(r) => text.push_str(match &*r {
                "amp" => "&",
                "lt" => "<",
                "gt" => ">",
                "quot" => "\"",
                "apos" => "'",
                _ => "",
            }),
            Event::End(_) => {
                let value = std::mem::take(&mut text).trim().to_string();
                let segs: Vec<&str> = path.iter().map(String::as_str).collect();
                match segs.as_slice() {
                    [_, "filename"] => filename = value,
                    [_, "size", "width"] => width = Some(value),
                    [_, "size", "height"] => height = Some(value),
                    [_, "object", "name"] => set(&mut objects, |o| o.name = Some(value)),
                    [_, "object", "bndbox", field] => {
                        let field = field.to_string();
                        set(&mut objects, |o| match field.as_str() {
                            "xmin" => o.xmin = Some(value),
                            "ymin" => o.ymin = Some(value),
                            "xmax" => o.xmax = Some(value),
                            "ymax" => o.ymax = Some(value),
                            _ => {}
                        })
                    }
                    _ => {}
                }
                path.pop();
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if !path.is_empty() {
        return Err(Error::Parse {
            offset: reader.buffer_position(),
            message: format!("unexpected end of document inside <{}>", path.join("><")),
        });
    }

    let dims = (
        parse_coord("size/width", width.as_deref())?,
        parse_coord("size/height", height.as_deref())?,
    );
    if dims.0 == 0 || dims.1 == 0 {
        return Err(Error::IncompleteAnnotation("image size is zero".into()));
    }
    let image_id = Path::new(&filename)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    objects
        .into_iter()
        .map(|o| {
            let class_name = o
                .name
                .filter(|n| !n.is_empty())
                .ok_or_else(|| Error::IncompleteAnnotation("object without name".into()))?;
            let xmin = parse_coord("bndbox/xmin", o.xmin.as_deref())?;
            let ymin = parse_coord("bndbox/ymin", o.ymin.as_deref())?;
            let xmax = parse_coord("bndbox/xmax", o.xmax.as_deref())?;
            let ymax = parse_coord("bndbox/ymax", o.ymax.as_deref())?;
            if xmin < 1 || ymin < 1 || xmax < xmin || ymax < ymin {
                return Err(Error::IncompleteAnnotation(format!(
                    "invalid box ({xmin}, {ymin}, {xmax}, {ymax})"
                )));
            }
            let raw = Region::new(xmin - 1, ymin - 1, xmax - xmin + 1, ymax - ymin + 1)?;
            let bbox = raw.clamp_to(dims.0, dims.1).ok_or_else(|| {
                Error::IncompleteAnnotation(format!("box {raw} lies outside the image"))
            })?;
            Ok(Annotation {
                image_id: image_id.clone(),
                filename: filename.clone(),
                class_name,
                bbox,
                image_dims: dims,
            })
        })
        .collect()
}

fn set(objects: &mut [ObjectFields], f: impl FnOnce(&mut ObjectFields)) {
    if let Some(o) = objects.last_mut() {
        f(o);
    }
}

/// Coordinates are integers, though some tools write them as `48.0`.
fn parse_coord(field: &str, value: Option<&str>) -> Result<u32> {
    let value = value.ok_or_else(|| Error::IncompleteAnnotation(format!("missing {field}")))?;
    value
        .parse::<u32>()
        .ok()
        .or_else(|| {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .map(|v| v.round() as u32)
        })
        .ok_or_else(|| Error::IncompleteAnnotation(format!("{field} is not a number: `{value}`")))
}

/// The annotation of a single-instance image, `None` otherwise.
pub fn single_instance(annotations: Vec<Annotation>) -> Option<Annotation> {
    let mut it = annotations.into_iter();
    match (it.next(), it.next()) {
        (Some(a), None) => Some(a),
        _ => None,
    }
}

/// Single-instance images found under an annotation directory.
#[derive(Debug, Clone, Default)]
pub struct VocDataset {
    pub entries: Vec<(Annotation, PathBuf)>,
    pub skipped: Vec<Skipped>,
    /// Annotation files dropped because they hold more or fewer than one object.
    pub multi_instance: Vec<String>,
}

impl VocDataset {
    /// Reads every `*.xml` in `annotations_dir` (sorted by name); images are
    /// looked up as `images_dir/<filename>`. Unreadable or malformed
    /// annotations are listed under `skipped`.
    pub fn load(images_dir: &Path, annotations_dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = fs::read_dir(annotations_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("xml")))
            .collect();
        files.sort();

        let mut out = Self::default();
        for file in files {
            let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let parsed = fs::read(&file).map_err(Error::from).and_then(|b| parse_annotation(&b));
            match parsed {
                Ok(annotations) => match single_instance(annotations) {
                    Some(mut a) => {
                        if a.image_id.is_empty() {
                            a.image_id = stem;
                        }
                        let image = if a.filename.is_empty() {
                            images_dir.join(format!("{}.png", a.image_id))
                        } else {
                            images_dir.join(&a.filename)
                        };
                        out.entries.push((a, image));
                    }
                    None => out.multi_instance.push(stem),
                },
                Err(e) => out.skipped.push(Skipped { image_id: stem, reason: e.to_string() }),
            }
        }
        Ok(out)
    }

    /// Evaluation samples, images still on disk.
    pub fn samples<T: Scalar>(&self) -> Vec<EvalSample<T>> {
        self.entries
            .iter()
            .map(|(a, path)| EvalSample {
                image_id: a.image_id.clone(),
                class_name: a.class_name.clone(),
                truth: a.bbox,
                source: ImageSource::File(path.clone()),
            })
            .collect()
    }
}

/// Per class, a seeded uniform draw of `min(per_class_cap, available)`
/// samples. Classes are visited in name order and samples within a class in
/// image-id order, so the draw depends only on the sample set and the seed.
pub fn sample_dataset<T: Scalar>(
    samples: Vec<EvalSample<T>>,
    per_class_cap: usize,
    seed: u64,
    skipped: Vec<Skipped>,
) -> Result<Selection<T>> {
    if per_class_cap == 0 {
        return Err(Error::InvalidConfig("per-class cap must be at least 1".into()));
    }
    let mut by_class: BTreeMap<String, Vec<EvalSample<T>>> = BTreeMap::new();
    for s in samples {
        by_class.entry(s.class_name.clone()).or_default().push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    for (_, mut group) in by_class {
        group.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        if group.len() > per_class_cap {
            let mut keep = rand::seq::index::sample(&mut rng, group.len(), per_class_cap).into_vec();
            keep.sort_unstable();
            let mut slots: Vec<Option<EvalSample<T>>> = group.into_iter().map(Some).collect();
            group = keep.into_iter().filter_map(|i| slots[i].take()).collect();
        }
        picked.extend(group);
    }
    Ok(Selection { samples: picked, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn voc(objects: &[(&str, [u32; 4])]) -> String {
        let mut s = String::from(
            "<annotation>\n  <folder>VOC2012</folder>\n  <filename>2008_000123.jpg</filename>\n  <size><width>500</width><height>375</height><depth>3</depth></size>\n",
        );
        for (name, [x0, y0, x1, y1]) in objects {
            s.push_str(&format!(
                "  <object>\n    <name>{name}</name>\n    <pose>Left</pose>\n    <bndbox><xmin>{x0}</xmin><ymin>{y0}</ymin><xmax>{x1}</xmax><ymax>{y1}</ymax></bndbox>\n  </object>\n"
            ));
        }
        s.push_str("</annotation>\n");
        s
    }

    #[test]
    fn converts_inclusive_one_based_boxes() {
        let a = parse_annotation(voc(&[("dog", [1, 1, 10, 10])]).as_bytes()).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].bbox, Region::new(0, 0, 10, 10).unwrap());
        assert_eq!(a[0].class_name, "dog");
        assert_eq!(a[0].image_id, "2008_000123");
        assert_eq!(a[0].image_dims, (500, 375));
    }

    #[test]
    fn two_objects_are_filtered() {
        let a = parse_annotation(voc(&[("dog", [1, 1, 10, 10]), ("cat", [20, 20, 40, 40])]).as_bytes())
            .unwrap();
        assert_eq!(a.len(), 2);
        assert!(single_instance(a).is_none());
        assert!(single_instance(Vec::new()).is_none());
    }

    #[test]
    fn truncated_document_is_a_parse_error() {
        let full = voc(&[("dog", [1, 1, 10, 10])]);
        let cut = &full.as_bytes()[..full.len() / 2];
        match parse_annotation(cut) {
            Err(Error::Parse { offset, .. }) => assert!(offset as usize <= cut.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse_annotation(b"<a><b></a>"), Err(Error::Parse { .. })));
    }

    #[test]
    fn missing_fields_are_incomplete() {
        let no_ymax = voc(&[("dog", [1, 1, 10, 10])]).replace("<ymax>10</ymax>", "");
        assert!(matches!(parse_annotation(no_ymax.as_bytes()), Err(Error::IncompleteAnnotation(_))));
        let no_size = voc(&[("dog", [1, 1, 10, 10])]).replace("<width>500</width>", "");
        assert!(matches!(parse_annotation(no_size.as_bytes()), Err(Error::IncompleteAnnotation(_))));
        let inverted = voc(&[("dog", [10, 1, 5, 10])]);
        assert!(matches!(parse_annotation(inverted.as_bytes()), Err(Error::IncompleteAnnotation(_))));
    }

    #[test]
    fn float_coordinates_and_entities() {
        let xml = voc(&[("potted&amp;plant", [1, 1, 10, 10])]).replace("<xmax>10</xmax>", "<xmax>10.0</xmax>");
        let a = parse_annotation(xml.as_bytes()).unwrap();
        assert_eq!(a[0].class_name, "potted&plant");
        assert_eq!(a[0].bbox.w, 10);
    }

    #[test]
    fn boxes_clamped_to_image() {
        let a = parse_annotation(voc(&[("dog", [490, 1, 520, 10])]).as_bytes()).unwrap();
        assert_eq!(a[0].bbox, Region::new(489, 0, 11, 10).unwrap());
    }

    fn samples(class: &str, n: usize) -> Vec<EvalSample<f64>> {
        (0..n)
            .map(|i| EvalSample {
                image_id: format!("{class}{i:04}"),
                class_name: class.into(),
                truth: Region::new(0, 0, 1, 1).unwrap(),
                source: ImageSource::File(PathBuf::from(format!("{i}.png"))),
            })
            .collect()
    }

    #[test]
    fn cap_rules() {
        let mut all = samples("small", 40);
        all.extend(samples("large", 500));
        let sel = sample_dataset(all.clone(), 100, 5, Vec::new()).unwrap();
        let count = |c: &str| sel.samples.iter().filter(|s| s.class_name == c).count();
        assert_eq!(count("small"), 40);
        assert_eq!(count("large"), 100);
        let mut ids: Vec<&str> = sel.samples.iter().map(|s| s.image_id.as_str()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 140);

        let again = sample_dataset(all.clone(), 100, 5, Vec::new()).unwrap();
        let key = |s: &Selection<f64>| s.samples.iter().map(|x| x.image_id.clone()).collect::<Vec<_>>();
        assert_eq!(key(&sel), key(&again));
        let other = sample_dataset(all, 100, 6, Vec::new()).unwrap();
        assert_ne!(key(&sel), key(&other));
        assert!(sample_dataset(samples("x", 3), 0, 0, Vec::new()).is_err());
    }

    #[test]
    fn dataset_directory_loading() {
        let dir = tempfile::tempdir().unwrap();
        let ann = dir.path().join("ann");
        fs::create_dir(&ann).unwrap();
        fs::write(ann.join("a.xml"), voc(&[("dog", [1, 1, 10, 10])])).unwrap();
        fs::write(ann.join("b.xml"), voc(&[("dog", [1, 1, 10, 10]), ("cat", [2, 2, 5, 5])])).unwrap();
        fs::write(ann.join("c.xml"), "<annotation><size>").unwrap();
        fs::write(ann.join("notes.txt"), "ignored").unwrap();
        let ds = VocDataset::load(&dir.path().join("img"), &ann).unwrap();
        assert_eq!(ds.entries.len(), 1);
        assert_eq!(ds.entries[0].1, dir.path().join("img").join("2008_000123.jpg"));
        assert_eq!(ds.multi_instance, vec!["b"]);
        assert_eq!(ds.skipped.len(), 1);
        assert_eq!(ds.skipped[0].image_id, "c");
    }
}
