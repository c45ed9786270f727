//! U-Net noise predictor with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat buffer. [`Denoiser::layout`] names every tensor in
//! declaration order, which is also the order of the checkpoint blob.

pub mod checkpoint;
pub mod ops;
pub mod optim;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::scalar::Real;
use crate::tensor::Tensor;

use ops::{ConvGeom, NormCache};

fn default_norm_groups() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_widths: Vec<usize>,
    pub resnet_blocks_per_stage: usize,
    pub middle_attention: bool,
    pub time_embed_dim: usize,
    #[serde(rename = "padded_W")]
    pub padded_w: usize,
    #[serde(rename = "padded_H")]
    pub padded_h: usize,
    /// Upper bound on group-norm groups; each layer uses `gcd(norm_groups, channels)`.
    #[serde(default = "default_norm_groups")]
    pub norm_groups: usize,
}

impl NetConfig {
    /// Desk-scale network for `z` levels on a `padded_w x padded_h` grid.
    pub fn desk(z: usize, padded_w: usize, padded_h: usize) -> Self {
        NetConfig {
            in_channels: 2 * z,
            base_widths: vec![32, 32, 64, 64],
            resnet_blocks_per_stage: 2,
            middle_attention: false,
            time_embed_dim: 64,
            padded_w,
            padded_h,
            norm_groups: 8,
        }
    }

    /// Tiny two-stage network (under 500 parameters) used for gradient checks.
    pub fn toy() -> Self {
        NetConfig {
            in_channels: 2,
            base_widths: vec![1, 2],
            resnet_blocks_per_stage: 1,
            middle_attention: true,
            time_embed_dim: 2,
            padded_w: 8,
            padded_h: 8,
            norm_groups: 8,
        }
    }

    pub fn stages(&self) -> usize {
        self.base_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be at least 1"));
        }
        if self.base_widths.is_empty() || self.base_widths.contains(&0) {
            return Err(Error::config("base_widths", "needs one or more positive widths"));
        }
        if self.resnet_blocks_per_stage == 0 {
            return Err(Error::config("resnet_blocks_per_stage", "must be at least 1"));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config("time_embed_dim", "must be even and positive"));
        }
        if self.norm_groups == 0 {
            return Err(Error::config("norm_groups", "must be at least 1"));
        }
        let factor = 1usize << self.stages();
        for (name, v) in [("padded_W", self.padded_w), ("padded_H", self.padded_h)] {
            if v == 0 || v % factor != 0 {
                return Err(Error::config(
                    name,
                    format!("{v} is not a positive multiple of 2^stages = {factor}"),
                ));
            }
        }
        Ok(())
    }
}

/// Sinusoidal step encoding before the learned projection.
pub fn time_embedding(s: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config("time_embed_dim", format!("{dim} is not a positive even number")));
    }
    Ok(ops::sinusoidal_embedding(s, dim))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Default)]
struct Builder {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let offset = self.total;
        let e = ParamEntry { name, offset, shape, init };
        self.total += e.len();
        self.entries.push(e);
        offset
    }

    fn conv(&mut self, name: &str, g: ConvGeom, zero: bool) -> ConvP {
        let fan = g.cin * g.k * g.k;
        let w_init = if zero { Init::Zeros } else { Init::FanIn(fan) };
        let w = self.add(format!("{name}.weight"), vec![g.cout, g.cin, g.k, g.k], w_init);
        self.add(format!("{name}.bias"), vec![g.cout], Init::Zeros);
        ConvP { g, w }
    }

    fn norm(&mut self, name: &str, c: usize, max_groups: usize) -> NormP {
        let gamma = self.add(format!("{name}.gamma"), vec![c], Init::Ones);
        self.add(format!("{name}.beta"), vec![c], Init::Zeros);
        NormP { c, groups: gcd(max_groups, c), gamma }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> LinP {
        let w = self.add(format!("{name}.weight"), vec![dout, din], Init::FanIn(din));
        self.add(format!("{name}.bias"), vec![dout], Init::Zeros);
        LinP { din, dout, w }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, cfg: &NetConfig) -> ResP {
        let c3 = |cin, cout| ConvGeom { cin, cout, k: 3, stride: 1, pad: 1 };
        ResP {
            norm1: self.norm(&format!("{name}.norm1"), cin, cfg.norm_groups),
            conv1: self.conv(&format!("{name}.conv1"), c3(cin, cout), false),
            temb: self.linear(&format!("{name}.time_proj"), cfg.time_embed_dim, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout, cfg.norm_groups),
            conv2: self.conv(&format!("{name}.conv2"), c3(cout, cout), false),
            skip: (cin != cout).then(|| {
                self.conv(
                    &format!("{name}.skip"),
                    ConvGeom { cin, cout, k: 1, stride: 1, pad: 0 },
                    false,
                )
            }),
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Convolution weights at `w`, bias right after them.
#[derive(Clone, Debug)]
struct ConvP {
    g: ConvGeom,
    w: usize,
}

impl ConvP {
    fn wlen(&self) -> usize {
        self.g.cout * self.g.cin * self.g.k * self.g.k
    }
    fn weight<'a, R>(&self, p: &'a [R]) -> &'a [R] {
        &p[self.w..self.w + self.wlen()]
    }
    fn bias<'a, R>(&self, p: &'a [R]) -> &'a [R] {
        &p[self.w + self.wlen()..self.w + self.wlen() + self.g.cout]
    }
    fn grads<'a, R>(&self, g: &'a mut [R]) -> (&'a mut [R], &'a mut [R]) {
        g[self.w..self.w + self.wlen() + self.g.cout].split_at_mut(self.wlen())
    }
    fn forward<R: Real>(&self, p: &[R], x: &Tensor<R>) -> Tensor<R> {
        ops::conv_forward(x, &self.g, self.weight(p), self.bias(p))
    }
    fn backward<R: Real>(&self, p: &[R], g: &mut [R], x: &Tensor<R>, dy: &Tensor<R>) -> Tensor<R> {
        let (dw, db) = self.grads(g);
        ops::conv_backward(x, &self.g, self.weight(p), dy, dw, db)
    }
}

#[derive(Clone, Debug)]
struct NormP {
    c: usize,
    groups: usize,
    gamma: usize,
}

impl NormP {
    fn forward<R: Real>(&self, p: &[R], x: &Tensor<R>) -> (Tensor<R>, NormCache<R>) {
        let c = self.c;
        ops::group_norm_forward(x, self.groups, &p[self.gamma..self.gamma + c], &p[self.gamma + c..self.gamma + 2 * c])
    }
    fn backward<R: Real>(
        &self,
        p: &[R],
        g: &mut [R],
        cache: &NormCache<R>,
        shape: (usize, usize, usize),
        dy: &Tensor<R>,
    ) -> Tensor<R> {
        let c = self.c;
        let (dg, db) = g[self.gamma..self.gamma + 2 * c].split_at_mut(c);
        ops::group_norm_backward(cache, shape, &p[self.gamma..self.gamma + c], dy, dg, db)
    }
}

#[derive(Clone, Debug)]
struct LinP {
    din: usize,
    dout: usize,
    w: usize,
}

impl LinP {
    fn forward<R: Real>(&self, p: &[R], x: &[R]) -> Vec<R> {
        let n = self.din * self.dout;
        ops::linear_forward(x, &p[self.w..self.w + n], &p[self.w + n..self.w + n + self.dout])
    }
    fn backward<R: Real>(&self, p: &[R], g: &mut [R], x: &[R], dy: &[R]) -> Vec<R> {
        let n = self.din * self.dout;
        let (dw, db) = g[self.w..self.w + n + self.dout].split_at_mut(n);
        ops::linear_backward(x, &p[self.w..self.w + n], dy, dw, db)
    }
}

#[derive(Clone, Debug)]
struct ResP {
    norm1: NormP,
    conv1: ConvP,
    temb: LinP,
    norm2: NormP,
    conv2: ConvP,
    skip: Option<ConvP>,
}

struct ResTape<R> {
    x: Tensor<R>,
    n1: NormCache<R>,
    a1: Tensor<R>,
    b1: Tensor<R>,
    n2: NormCache<R>,
    a2: Tensor<R>,
    b2: Tensor<R>,
}

impl ResP {
    fn forward<R: Real>(&self, p: &[R], x: Tensor<R>, semb: &[R]) -> (Tensor<R>, ResTape<R>) {
        let (a1, n1) = self.norm1.forward(p, &x);
        let b1 = ops::silu_tensor(&a1);
        let mut c1 = self.conv1.forward(p, &b1);
        let shift = self.temb.forward(p, semb);
        for (c, &v) in shift.iter().enumerate() {
            c1.channel_mut(c).iter_mut().for_each(|e| *e += v);
        }
        let (a2, n2) = self.norm2.forward(p, &c1);
        let b2 = ops::silu_tensor(&a2);
        let mut y = self.conv2.forward(p, &b2);
        match &self.skip {
            Some(sk) => add_into(&mut y, &sk.forward(p, &x)),
            None => add_into(&mut y, &x),
        }
        (y, ResTape { x, n1, a1, b1, n2, a2, b2 })
    }

    fn backward<R: Real>(
        &self,
        p: &[R],
        g: &mut [R],
        t: &ResTape<R>,
        dy: &Tensor<R>,
        dsemb: &mut [R],
        semb: &[R],
    ) -> Tensor<R> {
        let db2 = self.conv2.backward(p, g, &t.b2, dy);
        let da2 = ops::silu_backward_tensor(&t.a2, &db2);
        let dc1 = self.norm2.backward(p, g, &t.n2, t.a2.shape(), &da2);
        let dshift: Vec<R> = (0..dc1.c).map(|c| dc1.channel(c).iter().copied().sum()).collect();
        let ds = self.temb.backward(p, g, semb, &dshift);
        for (a, b) in dsemb.iter_mut().zip(ds) {
            *a += b;
        }
        let db1 = self.conv1.backward(p, g, &t.b1, &dc1);
        let da1 = ops::silu_backward_tensor(&t.a1, &db1);
        let mut dx = self.norm1.backward(p, g, &t.n1, t.x.shape(), &da1);
        match &self.skip {
            Some(sk) => add_into(&mut dx, &sk.backward(p, g, &t.x, dy)),
            None => add_into(&mut dx, dy),
        }
        dx
    }
}

fn add_into<R: Real>(a: &mut Tensor<R>, b: &Tensor<R>) {
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += *y;
    }
}

/// Single-head self-attention over spatial positions with a residual connection.
#[derive(Clone, Debug)]
struct AttnP {
    c: usize,
    norm: NormP,
    q: ConvP,
    k: ConvP,
    v: ConvP,
    o: ConvP,
}

struct AttnTape<R> {
    h: Tensor<R>,
    n: NormCache<R>,
    hn: Tensor<R>,
    q: Tensor<R>,
    k: Tensor<R>,
    v: Tensor<R>,
    a: Vec<R>,
    o: Tensor<R>,
}

impl AttnP {
    fn new(b: &mut Builder, c: usize, max_groups: usize) -> Self {
        let pw = ConvGeom { cin: c, cout: c, k: 1, stride: 1, pad: 0 };
        AttnP {
            c,
            norm: b.norm("mid.attn.norm", c, max_groups),
            q: b.conv("mid.attn.q", pw, false),
            k: b.conv("mid.attn.k", pw, false),
            v: b.conv("mid.attn.v", pw, false),
            o: b.conv("mid.attn.out", pw, false),
        }
    }

    fn forward<R: Real>(&self, p: &[R], h: Tensor<R>) -> (Tensor<R>, AttnTape<R>) {
        let np = h.plane();
        let (hn, n) = self.norm.forward(p, &h);
        let q = self.q.forward(p, &hn);
        let k = self.k.forward(p, &hn);
        let v = self.v.forward(p, &hn);
        let scale = R::one() / R::of(self.c as f64).sqrt();
        let mut a = vec![R::zero(); np * np];
        R::gemm(np, self.c, np, scale, &q.data, true, &k.data, false, R::zero(), &mut a);
        ops::softmax_rows(&mut a, np);
        let mut o = Tensor::zeros(self.c, h.w, h.h);
        R::gemm(self.c, np, np, R::one(), &v.data, false, &a, true, R::zero(), &mut o.data);
        let mut y = self.o.forward(p, &o);
        add_into(&mut y, &h);
        (y, AttnTape { h, n, hn, q, k, v, a, o })
    }

    fn backward<R: Real>(&self, p: &[R], g: &mut [R], t: &AttnTape<R>, dy: &Tensor<R>) -> Tensor<R> {
        let (c, np) = (self.c, t.h.plane());
        let scale = R::one() / R::of(c as f64).sqrt();
        let d_o = self.o.backward(p, g, &t.o, dy);
        let mut dv = Tensor::zeros(c, t.h.w, t.h.h);
        R::gemm(c, np, np, R::one(), &d_o.data, false, &t.a, false, R::zero(), &mut dv.data);
        let mut da = vec![R::zero(); np * np];
        R::gemm(np, c, np, R::one(), &d_o.data, true, &t.v.data, false, R::zero(), &mut da);
        // softmax backward, row by row
        for (drow, arow) in da.chunks_mut(np).zip(t.a.chunks(np)) {
            let dot: R = drow.iter().zip(arow).map(|(&d, &a)| d * a).sum();
            for (d, &a) in drow.iter_mut().zip(arow) {
                *d = a * (*d - dot);
            }
        }
        let mut dq = Tensor::zeros(c, t.h.w, t.h.h);
        R::gemm(c, np, np, scale, &t.k.data, false, &da, true, R::zero(), &mut dq.data);
        let mut dk = Tensor::zeros(c, t.h.w, t.h.h);
        R::gemm(c, np, np, scale, &t.q.data, false, &da, false, R::zero(), &mut dk.data);
        let mut dhn = self.q.backward(p, g, &t.hn, &dq);
        add_into(&mut dhn, &self.k.backward(p, g, &t.hn, &dk));
        add_into(&mut dhn, &self.v.backward(p, g, &t.hn, &dv));
        let mut dh = self.norm.backward(p, g, &t.n, t.h.shape(), &dhn);
        add_into(&mut dh, dy);
        dh
    }
}

#[derive(Clone, Debug)]
struct Arch {
    t1: LinP,
    t2: LinP,
    conv_in: ConvP,
    down: Vec<Vec<ResP>>,
    downsample: Vec<ConvP>,
    mid_a: ResP,
    attn: AttnP,
    mid_b: Vec<ResP>,
    /// Indexed by stage, like `down`; executed deepest first.
    up: Vec<Vec<ResP>>,
    norm_out: NormP,
    conv_out: ConvP,
}

impl Arch {
    fn build(cfg: &NetConfig) -> (Arch, Vec<ParamEntry>, usize) {
        let mut b = Builder::default();
        let d = cfg.time_embed_dim;
        let t1 = b.linear("time_mlp.0", d, d);
        let t2 = b.linear("time_mlp.1", d, d);
        let w = &cfg.base_widths;
        let n = w.len();
        let conv_in = b.conv(
            "conv_in",
            ConvGeom { cin: cfg.in_channels, cout: w[0], k: 3, stride: 1, pad: 1 },
            false,
        );
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut c = w[0];
        for (i, &wi) in w.iter().enumerate() {
            let mut blocks = Vec::new();
            for r in 0..cfg.resnet_blocks_per_stage {
                blocks.push(b.res(&format!("down.{i}.res.{r}"), c, wi, cfg));
                c = wi;
            }
            down.push(blocks);
            if i + 1 < n {
                downsample.push(b.conv(
                    &format!("down.{i}.downsample"),
                    ConvGeom { cin: c, cout: c, k: 3, stride: 2, pad: 1 },
                    false,
                ));
            }
        }
        let mid_a = b.res("mid.res.0", c, c, cfg);
        let attn = AttnP::new(&mut b, c, cfg.norm_groups);
        let mid_b = (1..cfg.resnet_blocks_per_stage)
            .map(|r| b.res(&format!("mid.res.{r}"), c, c, cfg))
            .collect();
        let mut up: Vec<Vec<ResP>> = vec![Vec::new(); n];
        for i in (0..n).rev() {
            let mut cin = c + w[i];
            for r in 0..cfg.resnet_blocks_per_stage {
                up[i].push(b.res(&format!("up.{i}.res.{r}"), cin, w[i], cfg));
                cin = w[i];
            }
            c = w[i];
        }
        let norm_out = b.norm("norm_out", c, cfg.norm_groups);
        let conv_out = b.conv(
            "conv_out",
            ConvGeom { cin: c, cout: cfg.in_channels, k: 3, stride: 1, pad: 1 },
            true,
        );
        let arch = Arch { t1, t2, conv_in, down, downsample, mid_a, attn, mid_b, up, norm_out, conv_out };
        (arch, b.entries, b.total)
    }
}

/// Intermediate values recorded by [`Denoiser::forward_tape`].
pub struct Tape<R> {
    e0: Vec<R>,
    h1: Vec<R>,
    a1: Vec<R>,
    temb: Vec<R>,
    semb: Vec<R>,
    x_in: Tensor<R>,
    down: Vec<Vec<ResTape<R>>>,
    down_in: Vec<Tensor<R>>,
    mid_a: ResTape<R>,
    attn: Option<AttnTape<R>>,
    mid_b: Vec<ResTape<R>>,
    up: Vec<Vec<ResTape<R>>>,
    up_dims: Vec<(usize, usize)>,
    up_split: Vec<usize>,
    n_out: NormCache<R>,
    a_out: Tensor<R>,
    b_out: Tensor<R>,
}

#[derive(Clone, Debug)]
pub struct Denoiser<R> {
    cfg: NetConfig,
    arch: Arch,
    layout: Vec<ParamEntry>,
    params: Vec<R>,
}

impl<R: Real> Denoiser<R> {
    /// Deterministic initialization from `seed`.
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (arch, layout, total) = Arch::build(&cfg);
        let mut rng = stream(seed, Domain::Init, 0);
        let mut params = vec![R::zero(); total];
        for e in &layout {
            let slot = &mut params[e.range()];
            match e.init {
                Init::Zeros => {}
                Init::Ones => slot.fill(R::one()),
                Init::FanIn(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    for v in slot.iter_mut() {
                        *v = R::of(rng.gen_range(-bound..=bound));
                    }
                }
            }
        }
        Ok(Denoiser { cfg, arch, layout, params })
    }

    pub fn from_params(cfg: NetConfig, params: Vec<R>) -> Result<Self> {
        cfg.validate()?;
        let (arch, layout, total) = Arch::build(&cfg);
        if params.len() != total {
            return Err(Error::Mismatch(format!(
                "network expects {total} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite network parameter".into()));
        }
        Ok(Denoiser { cfg, arch, layout, params })
    }

    /// Number of parameters `cfg` would allocate.
    pub fn param_count(cfg: &NetConfig) -> Result<usize> {
        cfg.validate()?;
        Ok(Arch::build(cfg).2)
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &[ParamEntry] {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[R] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [R] {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Denoiser<U> {
        Denoiser {
            cfg: self.cfg.clone(),
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    fn check_input(&self, x: &Tensor<R>) -> Result<()> {
        let want = (self.cfg.in_channels, self.cfg.padded_w, self.cfg.padded_h);
        if x.shape() != want {
            return Err(Error::Validation(format!(
                "denoiser input has shape {:?}, network expects {:?}",
                x.shape(),
                want
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<R>, s: usize) -> Result<Tensor<R>> {
        Ok(self.forward_tape(x, s)?.0)
    }

    pub fn forward_tape(&self, x: &Tensor<R>, s: usize) -> Result<(Tensor<R>, Tape<R>)> {
        self.check_input(x)?;
        let p = &self.params[..];
        let a = &self.arch;
        let e0: Vec<R> = ops::sinusoidal_embedding(s as f64, self.cfg.time_embed_dim)
            .into_iter()
            .map(R::of)
            .collect();
        let h1 = a.t1.forward(p, &e0);
        let a1 = ops::silu(&h1);
        let temb = a.t2.forward(p, &a1);
        let semb = ops::silu(&temb);

        let mut h = a.conv_in.forward(p, x);
        let mut skips = Vec::new();
        let mut down_tapes = Vec::new();
        let mut down_in = Vec::new();
        for (i, blocks) in a.down.iter().enumerate() {
            let mut tapes = Vec::new();
            for blk in blocks {
                let (y, t) = blk.forward(p, h, &semb);
                tapes.push(t);
                h = y;
            }
            down_tapes.push(tapes);
            skips.push(h.clone());
            if let Some(ds) = a.downsample.get(i) {
                let y = ds.forward(p, &h);
                down_in.push(h);
                h = y;
            }
        }
        let (y, mid_a) = a.mid_a.forward(p, h, &semb);
        h = y;
        let attn = if self.cfg.middle_attention {
            let (y, t) = a.attn.forward(p, h);
            h = y;
            Some(t)
        } else {
            None
        };
        let mut mid_b = Vec::new();
        for blk in &a.mid_b {
            let (y, t) = blk.forward(p, h, &semb);
            mid_b.push(t);
            h = y;
        }
        let n = a.up.len();
        let mut up_tapes: Vec<Vec<ResTape<R>>> = (0..n).map(|_| Vec::new()).collect();
        let mut up_dims = vec![(0, 0); n];
        let mut up_split = vec![0; n];
        for i in (0..n).rev() {
            up_dims[i] = (h.w, h.h);
            if i + 1 < n {
                h = ops::upsample_bilinear(&h);
            }
            up_split[i] = h.c;
            h = ops::concat(&h, &skips[i]);
            for blk in &a.up[i] {
                let (y, t) = blk.forward(p, h, &semb);
                up_tapes[i].push(t);
                h = y;
            }
        }
        let (a_out, n_out) = a.norm_out.forward(p, &h);
        let b_out = ops::silu_tensor(&a_out);
        let out = a.conv_out.forward(p, &b_out);
        let tape = Tape {
            e0,
            h1,
            a1,
            temb,
            semb,
            x_in: x.clone(),
            down: down_tapes,
            down_in,
            mid_a,
            attn,
            mid_b,
            up: up_tapes,
            up_dims,
            up_split,
            n_out,
            a_out,
            b_out,
        };
        Ok((out, tape))
    }

    /// Gradient of `<dy, forward(x, s)>` with respect to every parameter.
    pub fn backward(&self, x: &Tensor<R>, s: usize, dy: &Tensor<R>) -> Result<Vec<R>> {
        let (out, tape) = self.forward_tape(x, s)?;
        if !out.same_shape(dy) {
            return Err(Error::Validation("upstream gradient shape differs from output".into()));
        }
        Ok(self.backward_tape(&tape, dy))
    }

    pub fn backward_tape(&self, t: &Tape<R>, dy: &Tensor<R>) -> Vec<R> {
        let p = &self.params[..];
        let a = &self.arch;
        let mut g = vec![R::zero(); p.len()];
        let mut dsemb = vec![R::zero(); t.semb.len()];

        let db_out = a.conv_out.backward(p, &mut g, &t.b_out, dy);
        let da_out = ops::silu_backward_tensor(&t.a_out, &db_out);
        let mut dh = a.norm_out.backward(p, &mut g, &t.n_out, t.a_out.shape(), &da_out);

        let n = a.up.len();
        let mut dskips: Vec<Option<Tensor<R>>> = (0..n).map(|_| None).collect();
        for i in 0..n {
            for (blk, bt) in a.up[i].iter().zip(&t.up[i]).rev() {
                dh = blk.backward(p, &mut g, bt, &dh, &mut dsemb, &t.semb);
            }
            let (dprev, dskip) = ops::split(&dh, t.up_split[i]);
            dskips[i] = Some(dskip);
            dh = if i + 1 < n {
                let (w, h) = t.up_dims[i];
                ops::upsample_bilinear_backward(&dprev, w, h)
            } else {
                dprev
            };
        }
        for (blk, bt) in a.mid_b.iter().zip(&t.mid_b).rev() {
            dh = blk.backward(p, &mut g, bt, &dh, &mut dsemb, &t.semb);
        }
        if let Some(at) = &t.attn {
            dh = a.attn.backward(p, &mut g, at, &dh);
        }
        dh = a.mid_a.backward(p, &mut g, &t.mid_a, &dh, &mut dsemb, &t.semb);
        for i in (0..n).rev() {
            if let Some(ds) = a.downsample.get(i) {
                dh = ds.backward(p, &mut g, &t.down_in[i], &dh);
            }
            add_into(&mut dh, dskips[i].as_ref().expect("skip gradient set above"));
            for (blk, bt) in a.down[i].iter().zip(&t.down[i]).rev() {
                dh = blk.backward(p, &mut g, bt, &dh, &mut dsemb, &t.semb);
            }
        }
        a.conv_in.backward(p, &mut g, &t.x_in, &dh);

        let dtemb = ops::silu_backward(&t.temb, &dsemb);
        let da1 = a.t2.backward(p, &mut g, &t.a1, &dtemb);
        let dh1 = ops::silu_backward(&t.h1, &da1);
        a.t1.backward(p, &mut g, &t.e0, &dh1);
        g
    }
}
