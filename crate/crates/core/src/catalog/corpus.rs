//! Canonical corpus file:
//!
//! ```json
//! {"garments": [{"id", "category_id", "category_name", "text_tokens", "image_path"?}],
//!  "outfits":  [{"outfit_id", "garment_ids", "t_ocr", "t_mid", "split"}]}
//! ```
//!
//! Synthetic garments additionally carry `archetype` and `split`. Image
//! paths are relative to the corpus file and point at binary grids: `u32`
//! height and width (little-endian) followed by `3·H·W` little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{check_outfits, Catalog, Garment, Image, OutfitSample, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub catalog: Catalog,
    pub outfits: Vec<OutfitSample>,
}

#[derive(Serialize, Deserialize)]
struct GarmentRecord {
    id: String,
    category_id: usize,
    category_name: String,
    text_tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    archetype: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Serialize)]
struct CorpusFile<'a> {
    garments: Vec<GarmentRecord>,
    outfits: &'a [OutfitSample],
}

const IMAGE_DIR: &str = "images";

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 4 * img.data.len());
    bytes.extend_from_slice(&(img.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(img.width as u32).to_le_bytes());
    for v in &img.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Parse { path: path.display().to_string(), message: m };
    if bytes.len() < 8 {
        return Err(bad("image header is truncated".into()));
    }
    let height = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expect = 8 + 4 * Image::CHANNELS * height * width;
    if bytes.len() != expect {
        return Err(bad(format!("expected {expect} bytes for a {height}x{width} image, found {}", bytes.len())));
    }
    let data = bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Image { height, width, data })
}

/// Writes the corpus JSON and, for garments with images, one sidecar per
/// garment under `images/` next to it.
pub fn save_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::with_capacity(corpus.catalog.len());
    for g in corpus.catalog.garments() {
        let image_path = match &g.image {
            Some(img) => {
                let rel = format!("{IMAGE_DIR}/{}.img", g.id);
                let full = dir.join(&rel);
                if let Some(p) = full.parent() {
                    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
                }
                write_image(&full, img)?;
                Some(rel)
            }
            None => None,
        };
        records.push(GarmentRecord {
            id: g.id.clone(),
            category_id: g.category_id,
            category_name: g.category_name.clone(),
            text_tokens: g.text_tokens.clone(),
            image_path,
            archetype: g.archetype,
            split: g.split,
        });
    }
    let file = CorpusFile { garments: records, outfits: &corpus.outfits };
    let json = serde_json::to_vec(&file)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Reads and checks a corpus. Schema problems are reported with the JSON
/// path of the offending element; dangling garment ids are referential
/// errors.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let bad = |at: String, m: String| Error::Parse { path: origin.clone(), message: format!("{at}: {m}") };
    if text.trim().is_empty() {
        return Ok(Corpus::default());
    }
    let root: Value = serde_json::from_str(&text).map_err(|e| bad("$".into(), e.to_string()))?;
    let Value::Object(mut root) = root else {
        return Err(bad("$".into(), "expected an object".into()));
    };
    let mut take_array = |key: &str| -> Result<Vec<Value>> {
        match root.remove(key) {
            None | Some(Value::Null) => Ok(Vec::new()),
            Some(Value::Array(a)) => Ok(a),
            Some(_) => Err(bad(format!("$.{key}"), "expected an array".into())),
        }
    };
    let garment_values = take_array("garments")?;
    let outfit_values = take_array("outfits")?;

    let dir = path.parent().unwrap_or(Path::new("."));
    let mut garments = Vec::with_capacity(garment_values.len());
    for (i, v) in garment_values.into_iter().enumerate() {
        let r: GarmentRecord = serde_json::from_value(v).map_err(|e| bad(format!("$.garments[{i}]"), e.to_string()))?;
        let image = match &r.image_path {
            Some(p) => Some(read_image(&dir.join(p))?),
            None => None,
        };
        garments.push(Garment {
            id: r.id,
            category_id: r.category_id,
            category_name: r.category_name,
            text_tokens: r.text_tokens,
            image,
            archetype: r.archetype,
            split: r.split,
        });
    }
    let mut outfits = Vec::with_capacity(outfit_values.len());
    for (i, v) in outfit_values.into_iter().enumerate() {
        let o: OutfitSample = serde_json::from_value(v).map_err(|e| bad(format!("$.outfits[{i}]"), e.to_string()))?;
        outfits.push(o);
    }
    let catalog = Catalog::new(garments)?;
    check_outfits(&catalog, &outfits)?;
    Ok(Corpus { catalog, outfits })
}
