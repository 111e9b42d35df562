//! Datasets on disk: labeled cloud files, the dataset manifest and raw
//! image rasters.

mod synthetic;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub use synthetic::{generate, render_depth, Family, SyntheticConfig, FAMILIES};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::tokenization::Image;

pub const MANIFEST_MAGIC: &str = "EPCL-MANIFEST v1";
pub const IMAGE_MAGIC: &str = "EPCL-IMG v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Stable identifier, the manifest path for file-backed samples.
    pub id: String,
    pub cloud: PointCloud,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Copy)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// `(id, image, class)`.
    pub images: Vec<(String, Image, usize)>,
}

fn data_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Parses `x y z [label]` lines; `#` starts a comment.
pub fn parse_cloud(text: &str, path: &Path) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut columns = None;
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let at = |msg: String| data_err(path, format!("line {}: {msg}", no + 1));
        if fields.len() != 3 && fields.len() != 4 {
            return Err(at(format!("expected 3 or 4 columns, found {}", fields.len())));
        }
        match columns {
            None => columns = Some(fields.len()),
            Some(c) if c != fields.len() => {
                return Err(at(format!("{} columns after {c}-column lines", fields.len())));
            }
            Some(_) => {}
        }
        let mut p = [0.0f32; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f.parse().map_err(|_| at(format!("bad coordinate `{f}`")))?;
            if !slot.is_finite() {
                return Err(at(format!("non-finite coordinate `{f}`")));
            }
        }
        points.push(p);
        if let Some(l) = fields.get(3) {
            labels.push(l.parse::<u32>().map_err(|_| at(format!("bad label `{l}`")))?);
        }
    }
    let labels = (columns == Some(4)).then_some(labels);
    PointCloud::new(points, labels).map_err(|e| data_err(path, e.to_string()))
}

pub fn format_cloud(cloud: &PointCloud) -> String {
    let mut s = String::new();
    for (i, p) in cloud.points().iter().enumerate() {
        let _ = write!(s, "{} {} {}", p[0], p[1], p[2]);
        if let Some(l) = cloud.labels() {
            let _ = write!(s, " {}", l[i]);
        }
        s.push('\n');
    }
    s
}

pub fn load_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| data_err(path, e.to_string()))?;
    parse_cloud(&text, path)
}

pub fn save_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_cloud(cloud))?;
    Ok(())
}

/// `EPCL-IMG v1 H W C` header line followed by `H·W·C` raw bytes.
pub fn encode_image(img: &Image) -> Vec<u8> {
    let mut out = format!("{IMAGE_MAGIC} {} {} {}\n", img.height, img.width, img.channels).into_bytes();
    out.extend(img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Pixel bytes are scaled to `[0, 1]`.
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Image> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| data_err(path, "missing image header"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| data_err(path, "image header is not UTF-8"))?;
    let rest = header
        .strip_prefix(IMAGE_MAGIC)
        .ok_or_else(|| data_err(path, format!("bad image header `{header}`")))?;
    let dims: Vec<usize> = rest
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| data_err(path, format!("bad image header `{header}`")))?;
    let [h, w, c] = dims[..] else {
        return Err(data_err(path, format!("bad image header `{header}`")));
    };
    let body = &bytes[nl + 1..];
    if body.len() != h * w * c {
        return Err(data_err(path, format!("expected {} pixel bytes, found {}", h * w * c, body.len())));
    }
    Image::new(h, w, c, body.iter().map(|&b| f32::from(b) / 255.0).collect()).map_err(|e| data_err(path, e.to_string()))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| data_err(path, e.to_string()))?;
    decode_image(&bytes, path)
}

/// One entry of a manifest.
#[derive(Clone, Debug, PartialEq)]
pub enum ManifestEntry {
    Class { id: usize, name: String },
    Sample { path: String, class: usize, split: Split },
    Image { path: String, class: usize },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        match lines.next() {
            Some((_, l)) if l == MANIFEST_MAGIC => {}
            _ => return Err(data_err(path, format!("missing `{MANIFEST_MAGIC}` header"))),
        }
        let mut entries = Vec::new();
        for (no, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            let at = |msg: &str| data_err(path, format!("line {no}: {msg}"));
            let num = |s: &str| s.parse::<usize>().map_err(|_| at(&format!("bad class id `{s}`")));
            let entry = match f.as_slice() {
                ["class", id, name] => ManifestEntry::Class {
                    id: num(id)?,
                    name: name.to_string(),
                },
                ["sample", p, class, split] => ManifestEntry::Sample {
                    path: p.to_string(),
                    class: num(class)?,
                    split: match *split {
                        "train" => Split::Train,
                        "test" => Split::Test,
                        other => return Err(at(&format!("unknown split `{other}`"))),
                    },
                },
                ["image", p, class] => ManifestEntry::Image {
                    path: p.to_string(),
                    class: num(class)?,
                },
                _ => return Err(at(&format!("unrecognised entry `{line}`"))),
            };
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_MAGIC}\n");
        for e in &self.entries {
            let _ = match e {
                ManifestEntry::Class { id, name } => writeln!(s, "class {id} {name}"),
                ManifestEntry::Sample { path, class, split } => writeln!(s, "sample {path} {class} {}", split.as_str()),
                ManifestEntry::Image { path, class } => writeln!(s, "image {path} {class}"),
            };
        }
        s
    }

    /// Class names indexed by id. Ids must be `0..C` without gaps.
    pub fn classes(&self, path: &Path) -> Result<Vec<String>> {
        let mut named: Vec<(usize, String)> = self
            .entries
            .iter()
            .filter_map(|e| match e {
                ManifestEntry::Class { id, name } => Some((*id, name.clone())),
                _ => None,
            })
            .collect();
        named.sort();
        for (i, (id, _)) in named.iter().enumerate() {
            if *id != i {
                return Err(data_err(path, format!("class ids must be 0..{} without gaps or repeats", named.len())));
            }
        }
        Ok(named.into_iter().map(|(_, n)| n).collect())
    }
}

/// Loads a manifest and every file it references, relative to its
/// directory.
pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Dataset> {
    let path = manifest.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| data_err(path, e.to_string()))?;
    let m = Manifest::parse(&text, path)?;
    let classes = m.classes(path)?;
    let root: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut ds = Dataset {
        classes,
        ..Dataset::default()
    };
    for e in &m.entries {
        match e {
            ManifestEntry::Class { .. } => {}
            ManifestEntry::Sample { path: p, class, split } => {
                check_class(path, *class, ds.classes.len())?;
                let sample = Sample {
                    id: p.clone(),
                    cloud: load_cloud(root.join(p))?,
                    label: *class,
                };
                match split {
                    Split::Train => ds.train.push(sample),
                    Split::Test => ds.test.push(sample),
                }
            }
            ManifestEntry::Image { path: p, class } => {
                check_class(path, *class, ds.classes.len())?;
                ds.images.push((p.clone(), load_image(root.join(p))?, *class));
            }
        }
    }
    Ok(ds)
}

fn check_class(path: &Path, class: usize, count: usize) -> Result<()> {
    if class >= count {
        return Err(data_err(path, format!("class id {class} not declared ({count} classes)")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cloud_round_trip_and_errors() {
        let p = Path::new("mem");
        let c = parse_cloud("# header\n0 0 0 1\n1.5 -2 3e-3 0 # trailing\n\n", p).unwrap();
        assert_eq!(c.points()[1], [1.5, -2.0, 0.003]);
        assert_eq!(c.labels(), Some(&[1u32, 0][..]));
        assert_eq!(parse_cloud(&format_cloud(&c), p).unwrap(), c);
        let err = parse_cloud("0 0 0\n1 1 1 2\n", p).unwrap_err();
        assert!(matches!(err, Error::Data { .. }), "{err}");
        assert!(parse_cloud("0 0 nan\n", p).is_err());
    }

    #[test]
    fn image_round_trip() {
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 0.2, 1.0]).unwrap();
        let back = decode_image(&encode_image(&img), Path::new("mem")).unwrap();
        assert_eq!(back.data[1], 1.0);
        assert!((back.data[2] - 51.0 / 255.0).abs() < 1e-7);
        assert!(decode_image(b"EPCL-IMG v1 2 2 1\nabc", Path::new("mem")).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let text = "EPCL-MANIFEST v1\nclass 0 a\nclass 1 b\nsample x.txt 1 test\nimage y.img 0\n";
        let m = Manifest::parse(text, Path::new("m")).unwrap();
        assert_eq!(m.to_text(), text);
        assert_eq!(m.classes(Path::new("m")).unwrap(), vec!["a", "b"]);
        assert!(Manifest::parse("class 0 a\n", Path::new("m")).is_err());
    }
}
