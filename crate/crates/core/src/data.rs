//! Loading identity collections from disk and the validation split.

use std::fs;
use std::path::{Path, PathBuf};

use lap_tensor::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{contract, Error, Result};
use crate::io;
use crate::synth::{read_json, CollectionManifest, Tier, MANIFEST_FILE};

/// All views of one identity, in manifest order.
#[derive(Clone, Debug)]
pub struct Identity {
    pub dir: PathBuf,
    pub manifest: CollectionManifest,
    /// `[V, 3, H, W]`.
    pub images: Tensor,
    /// `[V, 1, H, W]` relaxed masks.
    pub masks: Tensor,
}

impl Identity {
    pub fn views(&self) -> usize {
        self.images.dim(0)
    }

    pub fn tier(&self) -> Tier {
        self.manifest.tier
    }

    pub fn resolution(&self) -> usize {
        self.images.dim(2)
    }

    /// Images and masks of the selected views.
    pub fn select(&self, views: &[usize]) -> Result<(Tensor, Tensor)> {
        let pick = |t: &Tensor| -> Result<Tensor> {
            let rows: Vec<Tensor> = views.iter().map(|&v| t.narrow(0, v, 1)).collect::<lap_tensor::Result<_>>()?;
            Ok(Tensor::concat(&rows.iter().collect::<Vec<_>>(), 0)?)
        };
        if views.is_empty() || views.iter().any(|&v| v >= self.views()) {
            return Err(contract(format!("view selection {views:?} for {} views", self.views())));
        }
        Ok((pick(&self.images)?, pick(&self.masks)?))
    }
}

pub fn load_identity(dir: &Path) -> Result<Identity> {
    let manifest: CollectionManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if manifest.views.is_empty() {
        return Err(Error::format(dir.join(MANIFEST_FILE), "manifest lists no views"));
    }
    let mut images = Vec::with_capacity(manifest.views.len());
    let mut masks = Vec::with_capacity(manifest.views.len());
    for v in &manifest.views {
        let img = io::read_png_rgb(dir.join(&v.image))?;
        let mask = io::read_mask_png(dir.join(&v.mask))?;
        if img.shape()[2..] != mask.shape()[2..] {
            return Err(Error::format(dir.join(&v.mask), "mask size differs from its image"));
        }
        images.push(img);
        masks.push(mask);
    }
    let cat = |ts: &[Tensor], what: &str| -> Result<Tensor> {
        Tensor::concat(&ts.iter().collect::<Vec<_>>(), 0)
            .map_err(|_| Error::format(dir, format!("{what} of differing sizes")))
    };
    Ok(Identity {
        images: cat(&images, "images")?,
        masks: cat(&masks, "masks")?,
        dir: dir.to_path_buf(),
        manifest,
    })
}

/// Every identity under `roots`: a root is either an identity directory or
/// a directory of them. Identities come back sorted by path.
pub fn load_dataset(roots: &[PathBuf]) -> Result<Vec<Identity>> {
    let mut dirs = Vec::new();
    for root in roots {
        if root.join(MANIFEST_FILE).is_file() {
            dirs.push(root.clone());
            continue;
        }
        let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        for e in entries {
            let p = e.map_err(|e| Error::io(root, e))?.path();
            if p.join(MANIFEST_FILE).is_file() {
                dirs.push(p);
            }
        }
    }
    dirs.sort();
    dirs.dedup();
    if dirs.is_empty() {
        return Err(contract(format!("no identity manifests found under {roots:?}")));
    }
    let out: Vec<Identity> = dirs.iter().map(|d| load_identity(d)).collect::<Result<_>>()?;
    let res = out[0].resolution();
    if let Some(bad) = out.iter().find(|i| i.resolution() != res || i.images.dim(3) != res) {
        return Err(Error::format(&bad.dir, format!("images are not {res}x{res}")));
    }
    Ok(out)
}

/// Hash of `(seed, identity)` that orders identities for the split.
fn split_key(seed: u64, id: &Identity) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.manifest.identity.as_bytes());
    h.update(id.manifest.seed.to_le_bytes());
    h.update(id.dir.file_name().map(|s| s.as_encoded_bytes()).unwrap_or_default());
    h.finalize().into()
}

/// Indices of (train, validation) identities: the `fraction` of identities
/// with the smallest seeded hash, at least one when there are two or more.
pub fn split(ids: &[Identity], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n = ids.len();
    let mut want = (fraction * n as f64).round() as usize;
    if n >= 2 && fraction > 0.0 {
        want = want.clamp(1, n - 1);
    }
    let mut order: Vec<(usize, [u8; 32])> = ids.iter().enumerate().map(|(i, id)| (i, split_key(seed, id))).collect();
    order.sort_by(|a, b| a.1.cmp(&b.1));
    let mut val: Vec<usize> = order[..want.min(n)].iter().map(|x| x.0).collect();
    val.sort_unstable();
    let train = (0..n).filter(|i| !val.contains(i)).collect();
    (train, val)
}
