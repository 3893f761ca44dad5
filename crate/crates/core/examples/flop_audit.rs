//! Per-layer convolution cost of the reference network.
//!
//! cargo run --release --example flop_audit -- [width] [height]

use xfeat::tensor::{FlopCounter, Tensor};
use xfeat::XFeatModel;

fn main() -> xfeat::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (w, h) = (args.first().copied().unwrap_or(800), args.get(1).copied().unwrap_or(600));
    let model = XFeatModel::<f32>::reference(0)?;
    let mut counter = FlopCounter::new();
    let out = model.infer_counted(&Tensor::zeros(&[1, 1, h, w]), &mut counter)?;

    for e in counter.entries() {
        println!("{:<36} {:>4}x{:<4} {:>4} -> {:<4} k{} {:>12}", e.layer, e.height, e.width, e.in_channels, e.out_channels, e.kernel, e.flops);
    }
    println!("descriptor pathway: {} convolutions", model.descriptor_convs().len());
    println!("backbone {} + keypoint head {}", counter.total_for("backbone"), counter.total_for("keypoint_head"));
    println!("total {} at {w}x{h}", counter.total());
    println!("feature map {:?}", out.feats.shape());
    Ok(())
}
