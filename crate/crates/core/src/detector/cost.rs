//! Per-layer FLOP and parameter accounting for one forward pass.

/// Accumulates multiply-add FLOPs (counted as 2 each) and parameter counts.
#[derive(Debug, Clone, Copy, Default)]
pub struct CostBook {
    pub flops: u64,
    pub params: u64,
}

impl CostBook {
    pub fn conv(
        &mut self,
        k: usize,
        cin_per_group: usize,
        cout: usize,
        h_out: usize,
        w_out: usize,
        bias: bool,
    ) {
        let kk = (k * k * cin_per_group * cout) as u64;
        self.params += kk + if bias { cout as u64 } else { 0 };
        self.flops += 2 * kk * (h_out * w_out) as u64;
    }

    /// Batch norm: 2 FLOPs per element, gamma and beta as parameters.
    pub fn bn(&mut self, c: usize, h: usize, w: usize) {
        self.params += 2 * c as u64;
        self.flops += 2 * (c * h * w) as u64;
    }

    /// Activation: 1 FLOP per element.
    pub fn act(&mut self, c: usize, h: usize, w: usize) {
        self.flops += (c * h * w) as u64;
    }
}
