//! Benchmark datasets: directory layouts, label conventions and class lists.
//!
//! | id          | images                                   | masks                                                   |
//! |-------------|------------------------------------------|---------------------------------------------------------|
//! | `voc`       | `JPEGImages/{id}.jpg`                    | `SegmentationClass/{id}.png`                            |
//! | `voc20`     | as `voc`                                 | as `voc`, background ignored                            |
//! | `context`   | `JPEGImages/{id}.jpg`                    | `SegmentationClassContext/{id}.png`                     |
//! | `context59` | as `context`                             | as `context`, background ignored                        |
//! | `object`    | `images/{split}2017/{id}.jpg`            | `annotations/{split}2017/{id}_instanceTrainIds.png`     |
//! | `stuff`     | `images/{split}2017/{id}.jpg`            | `annotations/{split}2017/{id}_labelTrainIds.png`        |
//! | `ade`       | `images/{split}/{id}.jpg`                | `annotations/{split}/{id}.png`                          |
//!
//! VOC ids come from `ImageSets/Segmentation/{split}.txt` and Context ids
//! from `ImageSets/SegmentationContext/{split}.txt`; the other datasets list
//! the image directory. Masks are single-channel or palette PNGs whose raw
//! indices are the labels; 255 is always ignored.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::{CategorySet, LabelMap, TemplateSet, IGNORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Voc,
    Voc20,
    Context,
    Context59,
    Object,
    Stuff,
    Ade,
}

impl DatasetId {
    pub const ALL: [DatasetId; 7] = [
        DatasetId::Voc,
        DatasetId::Voc20,
        DatasetId::Context,
        DatasetId::Context59,
        DatasetId::Object,
        DatasetId::Stuff,
        DatasetId::Ade,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DatasetId::Voc => "voc",
            DatasetId::Voc20 => "voc20",
            DatasetId::Context => "context",
            DatasetId::Context59 => "context59",
            DatasetId::Object => "object",
            DatasetId::Stuff => "stuff",
            DatasetId::Ade => "ade",
        }
    }

    pub fn includes_background(self) -> bool {
        matches!(self, DatasetId::Voc | DatasetId::Context | DatasetId::Object)
    }

    /// Number of label values, background included where present.
    pub fn num_classes(self) -> usize {
        match self {
            DatasetId::Voc => 21,
            DatasetId::Voc20 => 20,
            DatasetId::Context => 60,
            DatasetId::Context59 => 59,
            DatasetId::Object => 81,
            DatasetId::Stuff => 171,
            DatasetId::Ade => 150,
        }
    }

    pub fn default_split(self) -> &'static str {
        match self {
            DatasetId::Ade => "validation",
            _ => "val",
        }
    }

    pub fn class_list(self) -> &'static str {
        match self {
            DatasetId::Voc => include_str!("../assets/classes/voc.txt"),
            DatasetId::Voc20 => include_str!("../assets/classes/voc20.txt"),
            DatasetId::Context => include_str!("../assets/classes/context.txt"),
            DatasetId::Context59 => include_str!("../assets/classes/context59.txt"),
            DatasetId::Object => include_str!("../assets/classes/object.txt"),
            DatasetId::Stuff => include_str!("../assets/classes/stuff.txt"),
            DatasetId::Ade => include_str!("../assets/classes/ade.txt"),
        }
    }

    pub fn categories(self, templates: TemplateSet) -> Result<CategorySet> {
        CategorySet::parse(self.class_list(), self.includes_background(), templates)
    }

    /// Maps a raw mask value to a label.
    fn map_raw(self, raw: u16) -> Option<u16> {
        if raw == 255 {
            return Some(IGNORE);
        }
        let n = self.num_classes() as u16;
        let shifted = match self {
            DatasetId::Voc20 | DatasetId::Context59 | DatasetId::Ade => {
                if raw == 0 {
                    return Some(IGNORE);
                }
                raw - 1
            }
            _ => raw,
        };
        (shifted < n).then_some(shifted)
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::config(format!("unknown dataset `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub id: DatasetId,
    pub root: PathBuf,
    pub split: String,
}

impl DatasetSpec {
    pub fn new(id: DatasetId, root: impl Into<PathBuf>, split: Option<&str>) -> Self {
        Self {
            id,
            root: root.into(),
            split: split.unwrap_or(id.default_split()).to_string(),
        }
    }

    fn image_path(&self, id: &str) -> PathBuf {
        let r = &self.root;
        match self.id {
            DatasetId::Voc | DatasetId::Voc20 | DatasetId::Context | DatasetId::Context59 => {
                r.join("JPEGImages").join(format!("{id}.jpg"))
            }
            DatasetId::Object | DatasetId::Stuff => {
                r.join("images").join(format!("{}2017", self.split)).join(format!("{id}.jpg"))
            }
            DatasetId::Ade => r.join("images").join(&self.split).join(format!("{id}.jpg")),
        }
    }

    fn mask_path(&self, id: &str) -> PathBuf {
        let r = &self.root;
        match self.id {
            DatasetId::Voc | DatasetId::Voc20 => r.join("SegmentationClass").join(format!("{id}.png")),
            DatasetId::Context | DatasetId::Context59 => {
                r.join("SegmentationClassContext").join(format!("{id}.png"))
            }
            DatasetId::Object => r
                .join("annotations")
                .join(format!("{}2017", self.split))
                .join(format!("{id}_instanceTrainIds.png")),
            DatasetId::Stuff => r
                .join("annotations")
                .join(format!("{}2017", self.split))
                .join(format!("{id}_labelTrainIds.png")),
            DatasetId::Ade => r.join("annotations").join(&self.split).join(format!("{id}.png")),
        }
    }

    fn list_ids(&self) -> Result<Vec<String>> {
        let list = match self.id {
            DatasetId::Voc | DatasetId::Voc20 => Some("Segmentation"),
            DatasetId::Context | DatasetId::Context59 => Some("SegmentationContext"),
            _ => None,
        };
        if let Some(dir) = list {
            let path = self.root.join("ImageSets").join(dir).join(format!("{}.txt", self.split));
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            return Ok(text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect());
        }
        let dir = self.image_path("x").parent().expect("image dir").to_path_buf();
        let mut ids: Vec<String> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                (p.extension().and_then(|x| x.to_str()) == Some("jpg"))
                    .then(|| p.file_stem().and_then(|s| s.to_str()).map(String::from))
                    .flatten()
            })
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn open(&self) -> Result<Dataset> {
        let ids = self.list_ids()?;
        Ok(Dataset {
            spec: self.clone(),
            ids,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub ground_truth: LabelMap,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub ids: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn load_ground_truth(&self, index: usize) -> Result<LabelMap> {
        let id = &self.ids[index];
        let path = self.spec.mask_path(id);
        let raw = read_index_png(&path)?;
        let mut bad = None;
        let mapped = raw.mapv(|v| {
            self.spec.id.map_raw(v).unwrap_or_else(|| {
                bad = Some(v);
                IGNORE
            })
        });
        if let Some(v) = bad {
            return Err(Error::data(&path, format!("mask value {v} is not a {} label", self.spec.id)));
        }
        Ok(LabelMap(mapped))
    }

    pub fn load_image(&self, index: usize) -> Result<RgbImage> {
        let path = self.spec.image_path(&self.ids[index]);
        if !path.exists() {
            return Err(Error::data(&path, "image file missing"));
        }
        Ok(image::open(&path)
            .map_err(|e| Error::data(&path, e.to_string()))?
            .to_rgb8())
    }

    pub fn load_sample(&self, index: usize) -> Result<Sample> {
        if index >= self.ids.len() {
            return Err(Error::validation(format!(
                "sample index {index} beyond {} samples",
                self.ids.len()
            )));
        }
        let image = self.load_image(index)?;
        let ground_truth = self.load_ground_truth(index)?;
        let (h, w) = ground_truth.dim();
        if (w as u32, h as u32) != image.dimensions() {
            return Err(Error::data(
                self.spec.mask_path(&self.ids[index]),
                format!("mask is {w}x{h} but image is {}x{}", image.width(), image.height()),
            ));
        }
        Ok(Sample {
            id: self.ids[index].clone(),
            image,
            ground_truth,
        })
    }
}

/// Reads the raw sample values of a single-channel or palette PNG.
pub fn read_index_png(path: &Path) -> Result<Array2<u16>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let corrupt = |e: png::DecodingError| Error::data(path, e.to_string());
    let mut reader = decoder.read_info().map_err(corrupt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::data(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(corrupt)?;
    if !matches!(info.color_type, png::ColorType::Grayscale | png::ColorType::Indexed) {
        return Err(Error::data(path, format!("expected an index mask, found {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut out = Array2::<u16>::zeros((h, w));
    for y in 0..h {
        let row = &buf[y * info.line_size..(y + 1) * info.line_size];
        for x in 0..w {
            out[[y, x]] = match info.bit_depth {
                png::BitDepth::Eight => row[x] as u16,
                png::BitDepth::Sixteen => u16::from_be_bytes([row[2 * x], row[2 * x + 1]]),
                depth => {
                    let bits = depth as usize;
                    let per_byte = 8 / bits;
                    let byte = row[x / per_byte];
                    let shift = 8 - bits * (x % per_byte + 1);
                    ((byte >> shift) & ((1 << bits) - 1) as u8) as u16
                }
            };
        }
    }
    Ok(out)
}

/// The PASCAL VOC bit-interleaved colour map.
pub fn palette() -> Vec<[u8; 3]> {
    (0..256u32)
        .map(|i| {
            let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
            let mut c = i;
            for j in 0..8 {
                r |= ((c & 1) as u8) << (7 - j);
                g |= (((c >> 1) & 1) as u8) << (7 - j);
                b |= (((c >> 2) & 1) as u8) << (7 - j);
                c >>= 3;
            }
            [r, g, b]
        })
        .collect()
}

/// Writes labels as an 8-bit palette PNG; [`IGNORE`] is stored as 255.
pub fn write_index_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w) = labels.dim();
    let mut data = Vec::with_capacity(h * w);
    for &v in labels.0.iter() {
        data.push(match v {
            IGNORE => 255,
            v if v < 255 => v as u8,
            v => return Err(Error::validation(format!("label {v} does not fit an 8-bit palette"))),
        });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette().concat());
    let encode = |e: png::EncodingError| Error::data(path, e.to_string());
    let mut writer = enc.write_header().map_err(encode)?;
    writer.write_image_data(&data).map_err(encode)?;
    writer.finish().map_err(encode)
}
