//! Dataset construction: synthetic mixture draws or a directory of images.

use crate::config::DatasetConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{load_image, save_image};
use crate::parallel::run_indexed;
use crate::prior::MixturePrior;
use crate::rng::RngStream;
use std::path::Path;

/// The analytic mixture a synthetic dataset is drawn from, which doubles as
/// the default diffusion prior. Directory datasets have none.
pub fn generating_prior(cfg: &DatasetConfig) -> Result<Option<MixturePrior>> {
    match cfg {
        DatasetConfig::Synthetic { width, height, channels, levels, variance, .. } => {
            let dim = width * height * channels;
            Ok(Some(MixturePrior::isotropic(dim, levels, *variance)?))
        }
        DatasetConfig::Directory { .. } => Ok(None),
    }
}

/// Materialize the dataset as (image_id, image) pairs in a deterministic
/// order: synthetic images are drawn per-index from counter-based streams,
/// directory files are loaded in byte-wise name order.
pub fn generate_dataset(cfg: &DatasetConfig, master_seed: u64) -> Result<Vec<(String, Image)>> {
    cfg.validate()?;
    match cfg {
        DatasetConfig::Synthetic { count, width, height, channels, .. } => {
            let prior = generating_prior(cfg)?.expect("synthetic mode has a prior");
            let items = run_indexed(*count, |i| -> Result<(String, Image)> {
                let mut rng = RngStream::new(master_seed, &format!("dataset/{i}"));
                let img = Image::from_vec(*width, *height, *channels, prior.sample(&mut rng))?;
                Ok((format!("img{i:04}"), img))
            });
            items.into_iter().collect()
        }
        DatasetConfig::Directory { path } => load_directory(path),
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["pgm", "ppm", "wmf"];

fn load_directory(dir: &Path) -> Result<Vec<(String, Image)>> {
    let mut names: Vec<String> = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if !entry.file_type().map_err(|e| Error::io(dir, e))?.is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let matches = Path::new(&name)
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if matches {
            names.push(name);
        }
    }
    if names.is_empty() {
        return Err(Error::Config(format!("no image files (.pgm/.ppm/.wmf) in {}", dir.display())));
    }
    names.sort();
    let mut images = Vec::with_capacity(names.len());
    let mut failures = Vec::new();
    for name in &names {
        match load_image(&dir.join(name)) {
            Ok(img) => images.push((name.clone(), img)),
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Config(format!(
            "{} file(s) failed to load: {}",
            failures.len(),
            failures.join("; ")
        )));
    }
    Ok(images)
}

/// Write clamped 8-bit copies (.pgm / .ppm by channel count) for inspection.
pub fn export_dataset(items: &[(String, Image)], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (id, img) in items {
        let ext = if img.channels() == 3 { "ppm" } else { "pgm" };
        let stem = Path::new(id).file_stem().map(|s| s.to_string_lossy().into_owned());
        let name = format!("{}.{ext}", stem.unwrap_or_else(|| id.clone()));
        save_image(dir.join(name), img)?;
    }
    Ok(())
}
