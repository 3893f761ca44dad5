//! Writes and reads back a weight file and a feature cache.
//!
//! cargo run --release --example feature_cache -- [dir]

use std::path::PathBuf;

use xfeat::heads::DetectParams;
use xfeat::io::{load_features, load_weights, save_features, save_pgm, save_weights, load_image};
use xfeat::matcher::extract_sparse;
use xfeat::training::procedural_texture;
use xfeat::XFeatModel;

fn main() -> xfeat::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(std::env::temp_dir, PathBuf::from);
    let model = XFeatModel::<f32>::reduced(1)?;
    let weights = dir.join("example.xftw");
    save_weights(&model, &weights)?;
    let reloaded = load_weights(&weights)?;
    println!("{}: {} bytes, {} tensors", weights.display(), std::fs::metadata(&weights)?.len(), reloaded.params().len());

    let image = dir.join("example.pgm");
    save_pgm(&procedural_texture(256, 192, 5), &image)?;
    let img = load_image(&image)?;
    let set = extract_sparse(&reloaded, &img.to_tensor(), &DetectParams::default())?;
    let cache = dir.join("example.xftc");
    save_features(&set, &cache)?;
    let back = load_features(&cache)?;
    println!(
        "{}: {} bytes, {} keypoints of dim {}, identical after reload: {}",
        cache.display(),
        std::fs::metadata(&cache)?.len(),
        back.len(),
        back.dim,
        back == set
    );
    Ok(())
}
