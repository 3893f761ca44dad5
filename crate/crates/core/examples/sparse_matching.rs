//! Sparse detect, describe and match on a warped texture, then recover the
//! homography with RANSAC.
//!
//! cargo run --release --example sparse_matching -- [checkpoint.xftw]
//!
//! Without a checkpoint a randomly initialised reduced model is used; train
//! one with the `train_synthetic` example first for meaningful matches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xfeat::geometry::{corner_error, ransac_homography, Homography, RansacParams};
use xfeat::heads::DetectParams;
use xfeat::io::load_weights;
use xfeat::matcher::{extract_sparse, match_features};
use xfeat::training::procedural_texture;
use xfeat::XFeatModel;

fn main() -> xfeat::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(p) => load_weights(p.as_ref())?,
        None => XFeatModel::reduced(0)?,
    };
    let (w, h) = (320, 240);
    let img_a = procedural_texture(w, h, 7);
    let truth = Homography::from_row_major([0.95, 0.08, 6.0, -0.06, 0.97, 9.0, 1e-4, -5e-5, 1.0]);
    let img_b = img_a.warp(&truth, w, h, 0.0)?;

    let params = DetectParams { top_k: 1024, ..DetectParams::default() };
    let fa = extract_sparse(&model, &img_a.to_tensor(), &params)?;
    let fb = extract_sparse(&model, &img_b.to_tensor(), &params)?;
    let m = match_features(None, &fa, &fb, 0.0, None)?;
    println!("{} and {} keypoints, {} mutual matches", fa.len(), fb.len(), m.len());

    let pa: Vec<(f64, f64)> = m.coords_a.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
    let pb: Vec<(f64, f64)> = m.coords_b.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
    if pa.len() < 4 {
        println!("too few matches for a homography");
        return Ok(());
    }
    let r = ransac_homography(&pa, &pb, &RansacParams::default(), &mut ChaCha8Rng::seed_from_u64(0))?;
    match r.homography {
        Some(est) => println!(
            "{} inliers after {} iterations, corner error {:.2}px",
            r.inlier_count(),
            r.iterations,
            corner_error(&est, &truth, (w, h))?
        ),
        None => println!("RANSAC found no model"),
    }
    Ok(())
}
