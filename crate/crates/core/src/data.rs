//! KITTI-format labels, dataset manifests and random image subsets.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Annotation, BBox, ModerateFilter, Occlusion};
use crate::raster::LumaImage;
use crate::rng;

/// One KITTI object line: `type truncated occluded alpha l t r b h w l x y z ry [score]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiLabel {
    pub class: String,
    pub truncated: f64,
    pub occluded: i64,
    pub alpha: f64,
    pub bbox: [f64; 4],
    pub dimensions: [f64; 3],
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl fmt::Display for KittiLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.class, self.truncated, self.occluded, self.alpha)?;
        for v in self.bbox.iter().chain(&self.dimensions).chain(&self.location) {
            write!(f, " {v}")?;
        }
        write!(f, " {}", self.rotation_y)?;
        if let Some(s) = self.score {
            write!(f, " {s}")?;
        }
        Ok(())
    }
}

impl KittiLabel {
    /// A label carrying only the 2-D fields; 3-D fields use KITTI's "unknown" values.
    pub fn from_box(class: &str, bbox: &BBox, truncated: f64, occlusion: Occlusion) -> Self {
        Self {
            class: class.to_string(),
            truncated,
            occluded: occlusion.kitti_code(),
            alpha: -10.0,
            bbox: [bbox.left(), bbox.top(), bbox.right(), bbox.bottom()],
            dimensions: [-1.0, -1.0, -1.0],
            location: [-1000.0, -1000.0, -1000.0],
            rotation_y: -10.0,
            score: None,
        }
    }

    /// Unknown truncation or occlusion (negative codes, as on `DontCare`) map
    /// to the most restrictive values.
    pub fn to_annotation(&self, source_image: &str) -> Result<Annotation> {
        let [l, t, r, b] = self.bbox;
        let bbox = BBox::new(l, t, r, b)?;
        let occlusion = Occlusion::from_kitti(self.occluded).unwrap_or(Occlusion::Heavy);
        let truncation = if (0.0..=1.0).contains(&self.truncated) {
            self.truncated
        } else {
            1.0
        };
        Ok(Annotation {
            class_label: self.class.clone(),
            bbox,
            truncation,
            occlusion,
            source_image: source_image.to_string(),
        })
    }
}

/// Parse one label line. `line_no` is reported in errors.
pub fn parse_kitti_label(line: &str, line_no: usize) -> Result<KittiLabel> {
    let err = |message: String| Error::Parse {
        line: line_no,
        message,
    };
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < 15 {
        return Err(err(format!("expected at least 15 fields, got {}", fields.len())));
    }
    if fields.len() > 16 {
        return Err(err(format!("expected at most 16 fields, got {}", fields.len())));
    }
    let num = |i: usize| -> Result<f64> {
        fields[i]
            .parse::<f64>()
            .map_err(|_| err(format!("field {} is not a number: {:?}", i + 1, fields[i])))
    };
    let occluded_f = num(2)?;
    if occluded_f.fract() != 0.0 {
        return Err(err(format!("occlusion code {occluded_f} is not an integer")));
    }
    let bbox = [num(4)?, num(5)?, num(6)?, num(7)?];
    if bbox[2] <= bbox[0] || bbox[3] <= bbox[1] {
        return Err(err(format!("degenerate box {bbox:?}")));
    }
    Ok(KittiLabel {
        class: fields[0].to_string(),
        truncated: num(1)?,
        occluded: occluded_f as i64,
        alpha: num(3)?,
        bbox,
        dimensions: [num(8)?, num(9)?, num(10)?],
        location: [num(11)?, num(12)?, num(13)?],
        rotation_y: num(14)?,
        score: if fields.len() == 16 { Some(num(15)?) } else { None },
    })
}

/// Parse one label line straight into an [`Annotation`].
pub fn parse_kitti_label_line(line: &str, line_no: usize, source_image: &str) -> Result<Annotation> {
    parse_kitti_label(line, line_no)?
        .to_annotation(source_image)
        .map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })
}

pub fn read_label_file(path: &Path, source_image: &str) -> Result<Vec<Annotation>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_kitti_label_line(&line, i + 1, source_image)?);
    }
    Ok(out)
}

pub fn write_label_file(path: &Path, labels: &[KittiLabel]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for l in labels {
        writeln!(f, "{l}")?;
    }
    f.flush()?;
    Ok(())
}

/// Which classes are objects to detect and which are "don't care" regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSet {
    pub positive: Vec<String>,
    pub ignore: Vec<String>,
    pub moderate: ModerateFilter,
}

impl Default for ClassSet {
    fn default() -> Self {
        Self {
            positive: vec!["Car".into()],
            ignore: vec!["Van".into(), "Truck".into(), "DontCare".into()],
            moderate: ModerateFilter::default(),
        }
    }
}

impl ClassSet {
    pub fn is_positive_class(&self, a: &Annotation) -> bool {
        self.positive.iter().any(|c| *c == a.class_label)
    }

    /// A positive-class object that passes the moderate filter.
    pub fn is_target(&self, a: &Annotation) -> bool {
        self.is_positive_class(a) && self.moderate.accepts(a)
    }

    /// Regions that count neither as positives nor as background: ignore
    /// classes and positive-class objects failing the moderate filter.
    pub fn is_ignore(&self, a: &Annotation) -> bool {
        self.ignore.iter().any(|c| *c == a.class_label) || (self.is_positive_class(a) && !self.moderate.accepts(a))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub image_path: PathBuf,
    pub annotations: Vec<Annotation>,
}

impl Entry {
    /// Identifier used in detection dumps: the image file stem.
    pub fn image_id(&self) -> String {
        self.image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn load_image(&self) -> Result<LumaImage> {
        LumaImage::load(&self.image_path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub entries: Vec<Entry>,
    pub rng_seed: u64,
}

impl Dataset {
    pub fn new(name: impl Into<String>, entries: Vec<Entry>, rng_seed: u64) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.image_path.clone()) {
                return Err(Error::Config(format!("duplicate image {}", e.image_path.display())));
            }
            let src = e.image_path.to_string_lossy();
            if let Some(a) = e.annotations.iter().find(|a| a.source_image != src) {
                return Err(Error::Config(format!(
                    "annotation from {} listed under {}",
                    a.source_image, src
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            entries,
            rng_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Concatenate datasets (used for mixed-domain training).
    pub fn concat(name: &str, parts: &[&Dataset]) -> Result<Dataset> {
        let entries = parts.iter().flat_map(|d| d.entries.iter().cloned()).collect();
        Dataset::new(name, entries, parts.first().map_or(0, |d| d.rng_seed))
    }
}

/// Load a manifest of `image_path<TAB>label_path` lines. Relative paths are
/// resolved against the manifest's directory.
pub fn load_manifest(path: &Path, name: &str, rng_seed: u64) -> Result<Dataset> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let f = std::fs::File::open(path)?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let (img, lbl) = match (cols.next(), cols.next(), cols.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "expected image_path<TAB>label_path".into(),
                })
            }
        };
        let image_path = base.join(img);
        let src = image_path.to_string_lossy().into_owned();
        let annotations = read_label_file(&base.join(lbl), &src)?;
        entries.push(Entry {
            image_path,
            annotations,
        });
    }
    Dataset::new(name, entries, rng_seed)
}

/// Write a manifest listing `(image, label)` paths relative to `dir`.
pub fn write_manifest(path: &Path, rows: &[(String, String)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (img, lbl) in rows {
        writeln!(f, "{img}\t{lbl}")?;
    }
    f.flush()?;
    Ok(())
}

/// Random image-level subset: `round(fraction * N)` images (at least one).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn subset_size(&self, n: usize) -> usize {
        ((self.fraction * n as f64).round() as usize).clamp(1, n.max(1))
    }
}

/// Draw images uniformly without replacement; annotations travel with their
/// image and the original order is preserved.
pub fn subset_images(d: &Dataset, s: &SplitSpec) -> Result<Dataset> {
    if d.is_empty() {
        return Err(Error::Config("cannot subset an empty dataset".into()));
    }
    if !(s.fraction > 0.0 && s.fraction <= 1.0) {
        return Err(Error::Config(format!("subset fraction {} outside (0, 1]", s.fraction)));
    }
    let n = d.len();
    let k = s.subset_size(n);
    let mut picked = if k == n {
        (0..n).collect::<Vec<_>>()
    } else {
        let mut r = rng::stream(s.seed, rng::streams::SUBSET);
        index::sample(&mut r, n, k).into_vec()
    };
    picked.sort_unstable();
    Ok(Dataset {
        name: format!("{}[{}%]", d.name, s.fraction * 100.0),
        entries: picked.into_iter().map(|i| d.entries[i].clone()).collect(),
        rng_seed: d.rng_seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetStats {
    pub images: usize,
    pub moderate_vehicles: usize,
}

pub fn dataset_stats(d: &Dataset, classes: &ClassSet) -> DatasetStats {
    DatasetStats {
        images: d.len(),
        moderate_vehicles: d
            .entries
            .iter()
            .flat_map(|e| &e.annotations)
            .filter(|a| classes.is_target(a))
            .count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_car_line() {
        let line = "Car 0.00 0 -1.58 587.0 173.3 614.1 200.1 1.6 1.6 3.8 2.4 1.4 35.0 -1.5";
        let a = parse_kitti_label_line(line, 1, "img").unwrap();
        assert_eq!(a.class_label, "Car");
        assert_eq!(a.truncation, 0.0);
        assert_eq!(a.occlusion, Occlusion::None);
        assert_eq!(a.bbox, BBox::new(587.0, 173.3, 614.1, 200.1).unwrap());
    }

    #[test]
    fn dont_care_is_kept_as_ignore_region() {
        let line = "DontCare -1 -1 -10 50 50 60 60 -1 -1 -1 -1000 -1000 -1000 -10";
        let a = parse_kitti_label_line(line, 1, "img").unwrap();
        assert_eq!(a.class_label, "DontCare");
        let classes = ClassSet::default();
        assert!(classes.is_ignore(&a));
        assert!(!classes.is_target(&a));
    }

    #[test]
    fn malformed_lines_report_line_number() {
        for (line, n) in [
            ("Car 0 0 1 2 3 4", 7),
            ("Car 0 0 -1 10 10 5 20 1 1 1 1 1 1 1", 8),
            ("Car x 0 -1 1 1 5 5 1 1 1 1 1 1 1", 9),
        ] {
            match parse_kitti_label_line(line, n, "img") {
                Err(Error::Parse { line, .. }) => assert_eq!(line, n),
                other => panic!("expected parse error, got {other:?}"),
            }
        }
    }

    fn dataset(n: usize) -> Dataset {
        let entries = (0..n)
            .map(|i| Entry {
                image_path: PathBuf::from(format!("img{i:04}.png")),
                annotations: vec![],
            })
            .collect();
        Dataset::new("d", entries, 0).unwrap()
    }

    #[test]
    fn subset_sizes_and_identity() {
        let d = dataset(3164);
        let s = subset_images(&d, &SplitSpec { fraction: 0.1, seed: 3 }).unwrap();
        assert_eq!(s.len(), 316);
        let all = subset_images(&d, &SplitSpec { fraction: 1.0, seed: 3 }).unwrap();
        assert_eq!(all.entries, d.entries);
        let again = subset_images(&d, &SplitSpec { fraction: 0.1, seed: 3 }).unwrap();
        assert_eq!(s.entries, again.entries);
        let other = subset_images(&d, &SplitSpec { fraction: 0.1, seed: 4 }).unwrap();
        assert_ne!(s.entries, other.entries);
        let tiny = subset_images(&dataset(4), &SplitSpec { fraction: 0.01, seed: 1 }).unwrap();
        assert_eq!(tiny.len(), 1);
    }

    #[test]
    fn stats_count_moderate_positives() {
        assert_eq!(dataset_stats(&dataset(0), &ClassSet::default()), DatasetStats { images: 0, moderate_vehicles: 0 });
        let mk = |img: &str, h: f64, class: &str| Annotation {
            class_label: class.into(),
            bbox: BBox::new(0.0, 0.0, 50.0, h).unwrap(),
            truncation: 0.0,
            occlusion: Occlusion::None,
            source_image: img.into(),
        };
        let d = Dataset::new(
            "fixture",
            vec![
                Entry {
                    image_path: "a".into(),
                    annotations: vec![mk("a", 30.0, "Car"), mk("a", 40.0, "Car"), mk("a", 40.0, "Van")],
                },
                Entry {
                    image_path: "b".into(),
                    annotations: vec![mk("b", 30.0, "Car"), mk("b", 10.0, "Car")],
                },
            ],
            0,
        )
        .unwrap();
        assert_eq!(dataset_stats(&d, &ClassSet::default()), DatasetStats { images: 2, moderate_vehicles: 3 });
    }

    #[test]
    fn duplicate_images_rejected() {
        let e = Entry {
            image_path: "x.png".into(),
            annotations: vec![],
        };
        assert!(Dataset::new("d", vec![e.clone(), e], 0).is_err());
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![(-1e4..1e4f64), (-1.0..1.0f64), Just(0.0), Just(-10.0)]
    }

    proptest! {
        #[test]
        fn label_round_trip_is_bit_exact(
            t in 0.0..1.0f64, occ in 0..3i64, alpha in finite(),
            l in 0.0..500.0f64, w in 0.1..200.0f64, top in 0.0..300.0f64, h in 0.1..200.0f64,
            dims in proptest::array::uniform3(finite()), loc in proptest::array::uniform3(finite()),
            ry in finite(), score in proptest::option::of(finite()),
        ) {
            let label = KittiLabel {
                class: "Car".into(), truncated: t, occluded: occ, alpha,
                bbox: [l, top, l + w, top + h], dimensions: dims, location: loc, rotation_y: ry, score,
            };
            let back = parse_kitti_label(&label.to_string(), 1).unwrap();
            prop_assert_eq!(back.truncated.to_bits(), t.to_bits());
            prop_assert_eq!(&back, &label);
        }
    }
}
