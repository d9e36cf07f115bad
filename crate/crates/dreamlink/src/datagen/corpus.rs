//! Corpus construction and loading.
//!
//! A corpus directory holds `manifest.jsonl` (one JSON record per triplet),
//! `img/` with source and edited PNGs, and `fmri/` with a tensor store of
//! simulated brain responses (written by the mapper-training stage once
//! encoders exist). Everything except the fMRI tensors is a pure function
//! of `(seed, n)`, so rebuilding a corpus is byte-identical.

use super::edits::{apply_edit, gen_instruction, EditSpec};
use super::grammar::caption;
use super::scenes::{render, SceneSpec};
use crate::container::{atomic_write, sha256_hex, TensorStore};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, RegionMask};
use crate::seeding::derive_seed;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub index: u64,
    pub split: Split,
    pub caption: String,
    pub caption_edit: String,
    pub instruction: String,
    pub edit: EditSpec,
    pub scene: SceneSpec,
    pub scene_edit: SceneSpec,
    pub image: String,
    pub image_edit: String,
    pub fmri: String,
}

/// Encode an image to PNG bytes (8-bit RGB, values clamped to [0,1]).
pub fn encode_png(image: &ImageGrid) -> Result<Vec<u8>> {
    let (h, w) = (image.height(), image.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (image.data[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image.data[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (image.data[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let mut out = Vec::new();
    buf.write_to(
        &mut std::io::Cursor::new(&mut out),
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Container(format!("png encode: {e}")))?;
    Ok(out)
}

/// Decode PNG bytes back to an image with values in [0,1].
pub fn decode_png(bytes: &[u8]) -> Result<ImageGrid> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Container(format!("png decode: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ImageGrid::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                out.data[[c, y, x]] = px.0[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Quantize to the 8-bit grid the PNG round trip lands on.
pub fn quantize_image(image: &ImageGrid) -> ImageGrid {
    let mut q = image.clone();
    q.data.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    q
}

fn image_name(index: u64, edited: bool) -> String {
    if edited {
        format!("img/{index:06}_edit.png")
    } else {
        format!("img/{index:06}.png")
    }
}

/// Tensor-store name of the fMRI block for a triplet (rows: trials, then mean).
pub fn fmri_name(index: u64) -> String {
    format!("fmri_{index:06}")
}

/// Assign train/val splits: triplets whose rank under a seeded hash falls in
/// the smallest `round(n/10)` become validation.
fn assign_splits(seed: u64, indices: &[u64]) -> Vec<Split> {
    let n = indices.len();
    let n_val = ((n as f64) / 10.0).round() as usize;
    let mut ranked: Vec<(u64, usize)> = indices
        .iter()
        .enumerate()
        .map(|(pos, &idx)| (derive_seed(seed, "split", idx), pos))
        .collect();
    ranked.sort_unstable();
    let mut splits = vec![Split::Train; n];
    for &(_, pos) in ranked.iter().take(n_val) {
        splits[pos] = Split::Val;
    }
    splits
}

/// Build a corpus of `n_scenes * instructions_per_image` triplets under
/// `out_dir`. Writes the manifest and all PNGs; fMRI tensors are attached
/// later once encoders exist.
pub fn build_corpus(
    seed: u64,
    n_scenes: u64,
    instructions_per_image: u64,
    out_dir: &Path,
) -> Result<Vec<TripletRecord>> {
    if n_scenes == 0 || instructions_per_image == 0 {
        return Err(Error::Validation(
            "corpus needs at least one scene and one instruction per image".to_string(),
        ));
    }
    std::fs::create_dir_all(out_dir.join("img"))?;
    let mut records = Vec::new();
    let mut indices = Vec::new();
    for scene_idx in 0..n_scenes {
        for k in 0..instructions_per_image {
            let index = scene_idx * instructions_per_image + k;
            let (scene, edit, instruction) = gen_instruction(seed, scene_idx, k)?;
            let applied = apply_edit(&scene, &edit)?;
            let image = render(&scene);
            atomic_write(&out_dir.join(image_name(index, false)), &encode_png(&image)?)?;
            atomic_write(
                &out_dir.join(image_name(index, true)),
                &encode_png(&applied.image_edit)?,
            )?;
            records.push(TripletRecord {
                index,
                split: Split::Train, // fixed up below
                caption: caption(&scene),
                caption_edit: applied.caption_edit,
                instruction,
                edit,
                scene,
                scene_edit: applied.scene_edit,
                image: image_name(index, false),
                image_edit: image_name(index, true),
                fmri: fmri_name(index),
            });
            indices.push(index);
        }
    }
    let splits = assign_splits(seed, &indices);
    for (rec, split) in records.iter_mut().zip(splits) {
        rec.split = split;
    }
    let mut manifest = String::new();
    for rec in &records {
        manifest.push_str(&serde_json::to_string(rec)?);
        manifest.push('\n');
    }
    atomic_write(&out_dir.join("manifest.jsonl"), manifest.as_bytes())?;
    Ok(records)
}

/// A corpus on disk.
#[derive(Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub records: Vec<TripletRecord>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = std::fs::read_to_string(dir.join("manifest.jsonl"))?;
        let mut records = Vec::new();
        for (lineno, line) in manifest.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: TripletRecord = serde_json::from_str(line).map_err(|e| {
                Error::Container(format!("manifest line {}: {e}", lineno + 1))
            })?;
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::Validation("corpus manifest is empty".to_string()));
        }
        Ok(Corpus {
            dir: dir.to_path_buf(),
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn train_records(&self) -> Vec<&TripletRecord> {
        self.records.iter().filter(|r| r.split == Split::Train).collect()
    }

    pub fn val_records(&self) -> Vec<&TripletRecord> {
        self.records.iter().filter(|r| r.split == Split::Val).collect()
    }

    pub fn load_image(&self, rec: &TripletRecord) -> Result<ImageGrid> {
        decode_png(&std::fs::read(self.dir.join(&rec.image))?)
    }

    pub fn load_image_edit(&self, rec: &TripletRecord) -> Result<ImageGrid> {
        decode_png(&std::fs::read(self.dir.join(&rec.image_edit))?)
    }

    /// Ground-truth changed region, recomputed from the scene descriptions.
    pub fn region_truth(&self, rec: &TripletRecord) -> Result<RegionMask> {
        Ok(apply_edit(&rec.scene, &rec.edit)?.region_truth)
    }

    /// The store holding fMRI tensors (created on first write).
    pub fn fmri_store(&self) -> Result<TensorStore> {
        let dir = self.dir.join("fmri");
        if dir.join("index.json").exists() {
            TensorStore::open(&dir)
        } else {
            TensorStore::create(&dir)
        }
    }

    /// Hash of the manifest bytes, identifying corpus content.
    pub fn manifest_hash(&self) -> Result<String> {
        let bytes = std::fs::read(self.dir.join("manifest.jsonl"))?;
        Ok(sha256_hex(&bytes))
    }
}
