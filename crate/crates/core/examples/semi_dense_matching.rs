//! Semi-dense matching: every reliable cell at two scales, MNN, then offset
//! refinement with the confidence filter.
//!
//! cargo run --release --example semi_dense_matching -- [checkpoint.xftw] [top_k]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xfeat::geometry::{corner_error, ransac_homography, Homography, RansacParams};
use xfeat::io::load_weights;
use xfeat::matcher::{match_features, semi_dense_extract, MatchSet};
use xfeat::training::procedural_texture;
use xfeat::XFeatModel;

fn corner(m: &MatchSet, truth: &Homography, size: (usize, usize)) -> xfeat::Result<String> {
    if m.len() < 4 {
        return Ok("too few matches".into());
    }
    let pa: Vec<(f64, f64)> = m.coords_a.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
    let pb: Vec<(f64, f64)> = m.coords_b.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
    let r = ransac_homography(&pa, &pb, &RansacParams::default(), &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(match r.homography {
        Some(h) => format!("{} inliers, corner error {:.2}px", r.inlier_count(), corner_error(&h, truth, size)?),
        None => "no model".into(),
    })
}

fn main() -> xfeat::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = match args.next() {
        Some(p) => load_weights(p.as_ref())?,
        None => XFeatModel::reduced(0)?,
    };
    let top_k = args.next().and_then(|a| a.parse().ok()).unwrap_or(10_000);
    let (w, h) = (640, 480);
    let img_a = procedural_texture(w, h, 3);
    let truth = Homography::from_row_major([1.02, 0.05, -8.0, -0.04, 0.99, 5.0, 5e-5, 0.0, 1.0]);
    let img_b = img_a.warp(&truth, w, h, 0.0)?;

    let fa = semi_dense_extract(&model, &img_a.to_tensor(), top_k)?;
    let fb = semi_dense_extract(&model, &img_b.to_tensor(), top_k)?;
    println!("{} and {} candidates", fa.len(), fb.len());

    let coarse = match_features(None, &fa, &fb, -1.0, None)?;
    let refined = match_features(Some(&model), &fa, &fb, -1.0, Some(0.2))?;
    println!("coarse:  {} matches, {}", coarse.len(), corner(&coarse, &truth, (w, h))?);
    println!("refined: {} matches, {}", refined.len(), corner(&refined, &truth, (w, h))?);
    Ok(())
}
