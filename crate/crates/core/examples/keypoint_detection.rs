//! Keypoint head output decoded into a full-resolution heatmap, NMS and
//! top-k selection, next to the Harris labels used to train it.
//!
//! cargo run --release --example keypoint_detection -- [checkpoint.xftw]

use xfeat::heads::{detect_keypoints, reassemble_heatmap, reliability_full_res, DetectParams};
use xfeat::io::load_weights;
use xfeat::training::{procedural_texture, HarrisTeacher, KeypointTeacher};
use xfeat::XFeatModel;

fn main() -> xfeat::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(p) => load_weights(p.as_ref())?,
        None => XFeatModel::reduced(0)?,
    };
    let img = procedural_texture(320, 240, 21);
    let out = model.infer(&img.to_tensor().reshape(&[1, 1, 240, 320])?)?;
    let heat = reassemble_heatmap(&out.kpt_logits)?;
    let rel = reliability_full_res(&out.rel_logits)?;
    println!("logits {:?} -> heatmap {:?}", out.kpt_logits.shape(), heat.shape());

    let params = DetectParams { top_k: 10, ..DetectParams::default() };
    for k in detect_keypoints(&heat, &rel, out.image_size, &params)? {
        println!("({:6.1}, {:6.1}) score {:.4}", k.x, k.y, k.score);
    }
    let labels = HarrisTeacher::default().labels(&img);
    println!("teacher marks {} of {} cells", labels.positives(), labels.rows * labels.cols);
    Ok(())
}
