use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    check_size, preprocess_sample, read_gray_u8, write_binary, write_gray, DatasetIndex, EntryData,
    Sample, SourceTag, BAND_RADIUS,
};
use crate::error::{Error, Result};
use crate::plane::Plane;
use crate::superpixel::SlicParams;

pub const MANIFEST_FILE: &str = "manifest.json";
const LAYOUT_VERSION: u32 = 1;

/// Everything that changes the prepared planes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareParams {
    pub size: usize,
    /// `None` skips the region-mean channel.
    pub superpixel: Option<SlicParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub hash: String,
    pub count: usize,
    pub source: SourceTag,
    pub band_radius: usize,
    pub params: PrepareParams,
    pub ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrepareOutcome {
    pub count: usize,
    pub hash: String,
    /// The output already matched; nothing was written.
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

fn fingerprint(index: &DatasetIndex) -> Vec<String> {
    index
        .entries
        .iter()
        .map(|e| match &e.data {
            EntryData::Files { image, mask } => {
                let len = |p: &Path| std::fs::metadata(p).map(|m| m.len()).unwrap_or(0);
                format!(
                    "{}:{}:{}:{}:{}",
                    e.id,
                    image.display(),
                    len(image),
                    mask.display(),
                    len(mask)
                )
            }
            EntryData::Synthetic { seed, index, size } => {
                format!("{}:synthetic:{seed}:{index}:{size}", e.id)
            }
        })
        .collect()
}

/// Hash of the preprocessing parameters and the source listing.
pub fn prepare_hash(index: &DatasetIndex, params: &PrepareParams) -> Result<String> {
    let payload = serde_json::json!({
        "version": LAYOUT_VERSION,
        "band_radius": BAND_RADIUS,
        "params": params,
        "source": fingerprint(index),
    });
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&payload)?)))
}

fn read_manifest(dir: &Path) -> Result<Option<Manifest>> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

fn sources_inside(index: &DatasetIndex, out: &Path) -> bool {
    let Ok(out) = out.canonicalize() else {
        return false;
    };
    index.entries.iter().any(|e| match &e.data {
        EntryData::Files { image, mask } => [image, mask]
            .iter()
            .any(|p| p.canonicalize().is_ok_and(|p| p.starts_with(&out))),
        EntryData::Synthetic { .. } => false,
    })
}

/// Materialize preprocessed planes under `out`. A run whose parameter hash
/// matches the existing manifest writes nothing.
pub fn prepare_dataset(
    index: &DatasetIndex,
    params: &PrepareParams,
    out: &Path,
) -> Result<PrepareOutcome> {
    check_size(params.size)?;
    if let Some(sp) = &params.superpixel {
        sp.validate()?;
    }
    let hash = prepare_hash(index, params)?;
    if let Some(m) = read_manifest(out)? {
        if m.hash == hash && m.count == index.len() {
            return Ok(PrepareOutcome {
                count: m.count,
                hash,
                skipped: true,
            });
        }
    }
    if sources_inside(index, out) {
        return Err(Error::Config(format!(
            "output {} contains the input dataset; choose a separate directory",
            out.display()
        )));
    }
    let mut dirs = vec!["images", "masks", "edges"];
    if params.superpixel.is_some() {
        dirs.push("superpixels");
    }
    for d in &dirs {
        let p = out.join(d);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut ids = Vec::with_capacity(index.len());
    for entry in &index.entries {
        let raw = entry.load()?;
        let mut sample = preprocess_sample(entry.id.clone(), &raw, params.size)?;
        if let Some(sp) = &params.superpixel {
            sample = sample.with_superpixels(sp)?;
        }
        let file = format!("{}.png", entry.id);
        write_gray(
            &out.join("images").join(&file),
            &Plane::from_vec(params.size, params.size, sample.image.to_u8())?,
        )?;
        write_binary(&out.join("masks").join(&file), &sample.mask)?;
        write_binary(&out.join("edges").join(&file), &sample.edge)?;
        if let Some(sp) = &sample.superpixel {
            write_gray(
                &out.join("superpixels").join(&file),
                &Plane::from_vec(params.size, params.size, sp.to_u8())?,
            )?;
        }
        ids.push(entry.id.clone());
    }
    let manifest = Manifest {
        version: LAYOUT_VERSION,
        hash: hash.clone(),
        count: ids.len(),
        source: index.source,
        band_radius: BAND_RADIUS,
        params: params.clone(),
        ids,
    };
    let tmp = out.join(format!("{MANIFEST_FILE}.tmp"));
    std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&tmp, e))?;
    let dest = out.join(MANIFEST_FILE);
    std::fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))?;
    Ok(PrepareOutcome {
        count: manifest.count,
        hash,
        skipped: false,
    })
}

/// Read a directory written by [`prepare_dataset`].
pub fn load_prepared(dir: &Path) -> Result<PreparedDataset> {
    let manifest = read_manifest(dir)?.ok_or_else(|| {
        Error::Dataset(format!(
            "no prepared dataset at {} (missing {MANIFEST_FILE}); run `cf2net prepare` first",
            dir.display()
        ))
    })?;
    let unit = |p: Plane<u8>| p.map(|v| f32::from(v) / 255.0);
    let binary = |p: Plane<u8>| p.map(|v| v > 127);
    let mut samples = Vec::with_capacity(manifest.count);
    for id in &manifest.ids {
        let file = format!("{id}.png");
        let image = unit(read_gray_u8(&dir.join("images").join(&file))?);
        let superpixel = match manifest.params.superpixel {
            Some(_) => Some(unit(read_gray_u8(&dir.join("superpixels").join(&file))?)),
            None => None,
        };
        let sample = Sample {
            id: id.clone(),
            image,
            superpixel,
            mask: binary(read_gray_u8(&dir.join("masks").join(&file))?),
            edge: binary(read_gray_u8(&dir.join("edges").join(&file))?),
        };
        let s = manifest.params.size;
        if sample.image.dims() != (s, s)
            || sample.mask.dims() != (s, s)
            || sample.edge.dims() != (s, s)
        {
            return Err(Error::Dataset(format!(
                "{id}: prepared planes are not {s}×{s}"
            )));
        }
        samples.push(sample);
    }
    Ok(PreparedDataset {
        root: dir.to_path_buf(),
        manifest,
        samples,
    })
}
