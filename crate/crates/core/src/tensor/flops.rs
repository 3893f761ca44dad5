use serde::{Deserialize, Serialize};

/// One convolution's cost: `height * width * in_channels * out_channels * kernel^2`.
///
/// `height`/`width` are the layer's output dims, so strided layers are
/// charged per output position. Bias adds are not counted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopEntry {
    pub layer: String,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub flops: u64,
}

/// Per-layer convolution cost ledger (per image, independent of batch size).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounter {
    entries: Vec<FlopEntry>,
    total: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        layer: &str,
        height: usize,
        width: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) {
        let flops = height as u64
            * width as u64
            * in_channels as u64
            * out_channels as u64
            * (kernel * kernel) as u64;
        self.total += flops;
        self.entries.push(FlopEntry {
            layer: layer.to_string(),
            height,
            width,
            in_channels,
            out_channels,
            kernel,
            flops,
        });
    }

    pub fn entries(&self) -> &[FlopEntry] {
        &self.entries
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Sum over entries whose layer name starts with `prefix`.
    pub fn total_for(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.layer.starts_with(prefix))
            .map(|e| e.flops)
            .sum()
    }
}
