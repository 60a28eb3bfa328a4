//! Building blocks: conv+BN+activation, CSP and SPPF, and the slim-neck
//! GSConv family.

use rand_chacha::ChaCha12Rng;

use super::cost::CostBook;
use super::params::{BnState, ForwardCtx, ParamKind, ParamSet};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Relu,
    None,
}

/// Conv2d (no bias) + batch norm + activation.
#[derive(Debug, Clone)]
pub struct ConvBn {
    weight: usize,
    gamma: usize,
    beta: usize,
    bn_idx: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    act: Activation,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        bn: &mut BnState<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        act: Activation,
    ) -> Self {
        let weight = ps.register_conv_weight(
            format!("{name}.conv.weight"),
            cout,
            cin / groups,
            k,
            rng,
        );
        let gamma = ps.register(
            format!("{name}.bn.gamma"),
            vec![cout],
            vec![T::of(1.0); cout],
            ParamKind::BnGamma,
        );
        let beta = ps.register(
            format!("{name}.bn.beta"),
            vec![cout],
            vec![T::of(0.0); cout],
            ParamKind::BnBeta,
        );
        let bn_idx = bn.register(format!("{name}.bn"), cout);
        ConvBn {
            weight,
            gamma,
            beta,
            bn_idx,
            cin,
            cout,
            k,
            stride,
            pad,
            groups,
            act,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: &Tensor) -> Result<Tensor> {
        let w = ctx.leaf(self.weight)?.clone();
        let gamma = ctx.leaf(self.gamma)?.clone();
        let beta = ctx.leaf(self.beta)?.clone();
        let y = ctx
            .g
            .conv2d(x, &w, None, self.stride, self.pad, self.groups)?;
        let y = if ctx.training {
            let (out, mean, var) = ctx.g.batch_norm_train(&y, &gamma, &beta, ctx.bn_eps)?;
            ctx.bn.update(self.bn_idx, &mean, &var, ctx.bn_momentum);
            out
        } else {
            let entry = &ctx.bn.entries[self.bn_idx];
            let (mean, var) = (entry.mean.clone(), entry.var.clone());
            ctx.g
                .batch_norm_eval(&y, &gamma, &beta, &mean, &var, ctx.bn_eps)?
        };
        Ok(match self.act {
            Activation::Silu => ctx.g.silu(&y),
            Activation::Relu => ctx.g.relu(&y),
            Activation::None => y,
        })
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn cost(&self, book: &mut CostBook, shape: (usize, usize, usize)) -> (usize, usize, usize) {
        let (_, h, w) = shape;
        let (ho, wo) = self.out_hw(h, w);
        book.conv(self.k, self.cin / self.groups, self.cout, ho, wo, false);
        book.bn(self.cout, ho, wo);
        if self.act != Activation::None {
            book.act(self.cout, ho, wo);
        }
        (self.cout, ho, wo)
    }
}

/// Residual unit of the CSP block: 1x1 then 3x3, optional identity shortcut.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    cv1: ConvBn,
    cv2: ConvBn,
    shortcut: bool,
}

impl Bottleneck {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        bn: &mut BnState<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        c: usize,
        shortcut: bool,
    ) -> Self {
        Bottleneck {
            cv1: ConvBn::new(ps, bn, rng, &format!("{name}.cv1"), c, c, 1, 1, 0, 1, Activation::Silu),
            cv2: ConvBn::new(ps, bn, rng, &format!("{name}.cv2"), c, c, 3, 1, 1, 1, Activation::Silu),
            shortcut,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: &Tensor) -> Result<Tensor> {
        let y = self.cv1.forward(ctx, x)?;
        let y = self.cv2.forward(ctx, &y)?;
        if self.shortcut {
            ctx.g.add(x, &y)
        } else {
            Ok(y)
        }
    }

    pub fn cost(&self, book: &mut CostBook, shape: (usize, usize, usize)) -> (usize, usize, usize) {
        let s = self.cv1.cost(book, shape);
        self.cv2.cost(book, s)
    }
}

/// Cross-stage-partial block: two 1x1 branches, bottlenecks on one, 1x1 fuse.
#[derive(Debug, Clone)]
pub struct Csp {
    cv1: ConvBn,
    cv2: ConvBn,
    cv3: ConvBn,
    m: Vec<Bottleneck>,
}

impl Csp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        bn: &mut BnState<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        n: usize,
        shortcut: bool,
    ) -> Self {
        let ch = cout / 2;
        Csp {
            cv1: ConvBn::new(ps, bn, rng, &format!("{name}.cv1"), cin, ch, 1, 1, 0, 1, Activation::Silu),
            cv2: ConvBn::new(ps, bn, rng, &format!("{name}.cv2"), cin, ch, 1, 1, 0, 1, Activation::Silu),
            cv3: ConvBn::new(ps, bn, rng, &format!("{name}.cv3"), 2 * ch, cout, 1, 1, 0, 1, Activation::Silu),
            m: (0..n)
                .map(|i| Bottleneck::new(ps, bn, rng, &format!("{name}.m{i}"), ch, shortcut))
                .collect(),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: &Tensor) -> Result<Tensor> {
        let mut a = self.cv1.forward(ctx, x)?;
        for b in &self.m {
            a = b.forward(ctx, &a)?;
        }
        let c = self.cv2.forward(ctx, x)?;
        let cat = ctx.g.concat_channels(&[&a, &c])?;
        self.cv3.forward(ctx, &cat)
    }

    pub fn cost(&self, book: &mut CostBook, shape: (usize, usize, usize)) -> (usize, usize, usize) {
        let mut a = self.cv1.cost(book, shape);
        for b in &self.m {
            a = b.cost(book, a);
        }
        let c = self.cv2.cost(book, shape);
        self.cv3.cost(book, (a.0 + c.0, a.1, a.2))
    }
}

/// Fast spatial pyramid pooling: 1x1 reduce, three chained 5x5 stride-1
/// pools, concat, 1x1 fuse.
#[derive(Debug, Clone)]
pub struct Sppf {
    cv1: ConvBn,
    cv2: ConvBn,
}

impl Sppf {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        bn: &mut BnState<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let ch = cin / 2;
        Sppf {
            cv1: ConvBn::new(ps, bn, rng, &format!("{name}.cv1"), cin, ch, 1, 1, 0, 1, Activation::Silu),
            cv2: ConvBn::new(ps, bn, rng, &format!("{name}.cv2"), 4 * ch, cout, 1, 1, 0, 1, Activation::Silu),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: &Tensor) -> Result<Tensor> {
        let x = self.cv1.forward(ctx, x)?;
        let (_, _, h, w) = x.dims4()?;
        let p1 = ctx.g.maxpool2d_padded(&x, (5, 5), (1, 1), 2, h, w)?;
        let p2 = ctx.g.maxpool2d_padded(&p1, (5, 5), (1, 1), 2, h, w)?;
        let p3 = ctx.g.maxpool2d_padded(&p2, (5, 5), (1, 1), 2, h, w)?;
        let cat = ctx.g.concat_channels(&[&x, &p1, &p2, &p3])?;
        self.cv2.forward(ctx, &cat)
    }

    pub fn cost(&self, book: &mut CostBook, shape: (usize, usize, usize)) -> (usize, usize, usize) {
        let s = self.cv1.cost(book, shape);
        self.cv2.cost(book, (4 * s.0, s.1, s.2))
    }
}

/// Half dense conv, half depthwise conv, interleaved by a channel shuffle.
/// The dense half is 3x3 with the block's stride; the depthwise half is 5x5.
#[derive(Debug, Clone)]
pub struct GsConv {
    dense: ConvBn,
    depthwise: ConvBn,
}

impl GsConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        bn: &mut BnState<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        act: Activation,
    ) -> Result<Self> {
        if cout % 2 != 0 {
            return Err(crate::error::Error::shape(
                "gsconv",
                format!("output channels must be even, got {}", cout),
            ));
        }
        let half = cout / 2;
        Ok(GsConv {
            dense: ConvBn::new(ps, bn, rng, &format!("{name}.dense"), cin, half, 3, stride, 1, 1, act),
            depthwise: ConvBn::new(
                ps,
                bn,
                rng,
                &format!("{name}.dw"),
                half,
                half,
                5,
                1,
                2,
                half,
                act,
            ),
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: &Tensor) -> Result<Tensor> {
        let a = self.dense.forward(ctx, x)?;
        let b = self.depthwise.forward(ctx, &a)?;
        let cat = ctx.g.concat_channels(&[&a, &b])?;
        ctx.g.channel_shuffle(&cat, 2)
    }

    pub fn cost(&self, book: &mut CostBook, shape: (usize, usize, usize)) -> (usize, usize, usize) {
        let a = self.dense.cost(book, shape);
        let b = self.depthwise.cost(book, a);
        (a.0 + b.0, b.1, b.2)
    }
}

/// Two stacked GSConv layers (BN + ReLU each) with a 1x1 conv shortcut.
#[derive(Debug, Clone)]
pub struct GsBottleneck {
    gs1: GsConv,
    gs2: GsConv,
    shortcut: ConvBn,
}

impl GsBottleneck {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        bn: &mut BnState<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        Ok(GsBottleneck {
            gs1: GsConv::new(ps, bn, rng, &format!("{name}.gs1"), cin, cout, 1, Activation::Relu)?,
            gs2: GsConv::new(ps, bn, rng, &format!("{name}.gs2"), cout, cout, 1, Activation::Relu)?,
            shortcut: ConvBn::new(
                ps,
                bn,
                rng,
                &format!("{name}.shortcut"),
                cin,
                cout,
                1,
                1,
                0,
                1,
                Activation::None,
            ),
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: &Tensor) -> Result<Tensor> {
        let y = self.gs1.forward(ctx, x)?;
        let y = self.gs2.forward(ctx, &y)?;
        let s = self.shortcut.forward(ctx, x)?;
        ctx.g.add(&y, &s)
    }

    pub fn cost(&self, book: &mut CostBook, shape: (usize, usize, usize)) -> (usize, usize, usize) {
        let a = self.gs1.cost(book, shape);
        let b = self.gs2.cost(book, a);
        self.shortcut.cost(book, shape);
        b
    }
}

/// CSP-style split with GS bottlenecks on one branch.
#[derive(Debug, Clone)]
pub struct VovGsCsp {
    cv1: ConvBn,
    cv2: ConvBn,
    cv3: ConvBn,
    m: Vec<GsBottleneck>,
}

impl VovGsCsp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        bn: &mut BnState<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        n: usize,
    ) -> Result<Self> {
        let ch = cout / 2;
        Ok(VovGsCsp {
            cv1: ConvBn::new(ps, bn, rng, &format!("{name}.cv1"), cin, ch, 1, 1, 0, 1, Activation::Silu),
            cv2: ConvBn::new(ps, bn, rng, &format!("{name}.cv2"), cin, ch, 1, 1, 0, 1, Activation::Silu),
            cv3: ConvBn::new(ps, bn, rng, &format!("{name}.cv3"), 2 * ch, cout, 1, 1, 0, 1, Activation::Silu),
            m: (0..n)
                .map(|i| GsBottleneck::new(ps, bn, rng, &format!("{name}.m{i}"), ch, ch))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: &Tensor) -> Result<Tensor> {
        let mut a = self.cv1.forward(ctx, x)?;
        for b in &self.m {
            a = b.forward(ctx, &a)?;
        }
        let c = self.cv2.forward(ctx, x)?;
        let cat = ctx.g.concat_channels(&[&a, &c])?;
        self.cv3.forward(ctx, &cat)
    }

    pub fn cost(&self, book: &mut CostBook, shape: (usize, usize, usize)) -> (usize, usize, usize) {
        let mut a = self.cv1.cost(book, shape);
        for b in &self.m {
            a = b.cost(book, a);
        }
        let c = self.cv2.cost(book, shape);
        self.cv3.cost(book, (a.0 + c.0, a.1, a.2))
    }
}

/// Detection head: one 1x1 conv with bias emitting anchors*(5+classes) maps.
#[derive(Debug, Clone)]
pub struct HeadConv {
    weight: usize,
    bias: usize,
    pub cin: usize,
    pub cout: usize,
}

impl HeadConv {
    /// Objectness logits start strongly negative so early training is not
    /// swamped by background cells.
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        anchors: usize,
        num_classes: usize,
    ) -> Self {
        let per = 5 + num_classes;
        let cout = anchors * per;
        let weight = ps.register_conv_weight(format!("{name}.weight"), cout, cin, 1, rng);
        let mut bias_data = vec![T::zero(); cout];
        for a in 0..anchors {
            bias_data[a * per + 4] = T::of(-4.0);
        }
        let bias = ps.register(format!("{name}.bias"), vec![cout], bias_data, ParamKind::Bias);
        HeadConv {
            weight,
            bias,
            cin,
            cout,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: &Tensor) -> Result<Tensor> {
        let w = ctx.leaf(self.weight)?.clone();
        let b = ctx.leaf(self.bias)?.clone();
        ctx.g.conv2d(x, &w, Some(&b), 1, 0, 1)
    }

    pub fn cost(&self, book: &mut CostBook, shape: (usize, usize, usize)) -> (usize, usize, usize) {
        let (_, h, w) = shape;
        book.conv(1, self.cin, self.cout, h, w, true);
        (self.cout, h, w)
    }
}
