//! Homography accuracy over a set of random synthetic warps: RANSAC per
//! pair, then MHA at 3/5/7 px, mean corner error and inlier ratio.
//!
//! cargo run --release --example homography_eval -- [checkpoint.xftw] [pairs]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xfeat::geometry::{corner_error, ransac_homography, EvalReport, PairResult, RansacParams, MHA_THRESHOLDS};
use xfeat::heads::DetectParams;
use xfeat::io::load_weights;
use xfeat::matcher::{extract_sparse, match_features};
use xfeat::training::warp::random_homography;
use xfeat::training::{procedural_texture, WarpParams};
use xfeat::XFeatModel;

fn main() -> xfeat::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = match args.next() {
        Some(p) => load_weights(p.as_ref())?,
        None => XFeatModel::reduced(0)?,
    };
    let n: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(8);
    let (w, h) = (320, 240);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut results = Vec::new();
    for k in 0..n {
        let a = procedural_texture(w, h, 100 + k);
        let truth = random_homography(w, h, &WarpParams::default(), &mut rng);
        let b = a.warp(&truth, w, h, 0.0)?;
        let params = DetectParams { top_k: 2048, ..DetectParams::default() };
        let m = match_features(None, &extract_sparse(&model, &a.to_tensor(), &params)?, &extract_sparse(&model, &b.to_tensor(), &params)?, -1.0, None)?;
        let pa: Vec<(f64, f64)> = m.coords_a.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
        let pb: Vec<(f64, f64)> = m.coords_b.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
        let (err, inliers) = if pa.len() >= 4 {
            let r = ransac_homography(&pa, &pb, &RansacParams::default(), &mut rng)?;
            let e = r.homography.map_or(f64::INFINITY, |est| corner_error(&est, &truth, (w, h)).unwrap_or(f64::INFINITY));
            (e, r.inlier_count())
        } else {
            (f64::INFINITY, 0)
        };
        println!("pair {k}: {} matches, {inliers} inliers, corner error {err:.2}px", pa.len());
        results.push(PairResult { name: format!("warp{k}"), matches: pa.len(), inliers, corner_error: err });
    }
    let report = EvalReport::from_pairs(results, &MHA_THRESHOLDS);
    for (t, acc) in &report.mha {
        println!("MHA@{t}: {:.1}%", 100.0 * acc);
    }
    println!("mean corner error {:.2}px, MIR {:.3}, failures {}", report.mean_corner_error, report.mir, report.failures);
    Ok(())
}
