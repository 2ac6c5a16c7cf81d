use serde::{Deserialize, Serialize};

use super::layers::{film, timestep_embedding, Bind, Conv, Init, Linear, Norm};
use crate::error::{Error, Result};
use crate::physics::CameraSetting;
use crate::tensor::ParamId;
use crate::{Graph, ParamSet, Rng, Tensor, Var};

/// `p = Conv1×1([c̃, sin c̃, cos c̃])` with `c̃ = Conv1×1(c)`.
#[derive(Debug, Clone, Copy)]
pub struct PositionalEncoder {
    lift: Conv,
    mix: Conv,
}

impl PositionalEncoder {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize, init: Init, rng: &mut Rng) -> Self {
        Self {
            lift: Conv::pointwise(ps, &format!("{name}.lift"), 2, dim, init, rng),
            mix: Conv::pointwise(ps, &format!("{name}.mix"), 3 * dim, dim, init, rng),
        }
    }

    /// `coords: [B, 2, H, W]` → `p: [B, dim, H, W]`.
    pub fn encode(&self, g: &mut Graph, bind: Bind, coords: Var) -> Result<Var> {
        let s = g.shape(coords);
        if s.len() != 4 || s[1] != 2 {
            return Err(Error::shape(
                "encode_position",
                format!("coords must be [B, 2, H, W], got {s:?}"),
            ));
        }
        let c = self.lift.forward(g, bind, coords)?;
        let sn = g.sin(c);
        let cs = g.cos(c);
        let cat = g.concat(&[c, sn, cs], 1)?;
        self.mix.forward(g, bind, cat)
    }
}

/// Learned embedding rows, one per registered camera setting plus spares.
/// Each row is read as `tokens` key/value tokens of width `dim`.
#[derive(Debug, Clone)]
pub struct CameraEmbeddingBank {
    table: ParamId,
    settings: Vec<CameraSetting>,
    tokens: usize,
    dim: usize,
}

impl CameraEmbeddingBank {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        settings: &[CameraSetting],
        tokens: usize,
        dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut unique: Vec<CameraSetting> = Vec::new();
        for s in settings {
            if unique.contains(s) {
                return Err(Error::Config(format!("camera setting {s} registered twice")));
            }
            unique.push(*s);
        }
        let rows = 2 * unique.len() + 8;
        let table = ps.randn(format!("{name}.table"), &[rows, tokens * dim], 0.02, rng);
        Ok(Self {
            table,
            settings: unique,
            tokens,
            dim,
        })
    }

    pub fn rows(&self, ps: &ParamSet) -> usize {
        ps.get(self.table).shape()[0]
    }

    pub fn settings(&self) -> &[CameraSetting] {
        &self.settings
    }

    pub fn index_of(&self, setting: &CameraSetting) -> Result<usize> {
        self.settings.iter().position(|s| s == setting).ok_or_else(|| {
            let known: Vec<String> = self.settings.iter().map(|s| s.to_string()).collect();
            Error::InvalidArgument(format!(
                "camera setting {setting} is not registered; known settings: {}",
                known.join(", ")
            ))
        })
    }

    /// `[B, tokens, dim]` for the given row indices.
    pub fn lookup(&self, g: &mut Graph, bind: Bind, indices: &[usize]) -> Result<Var> {
        let table = bind.var(g, self.table);
        let rows = g.gather_rows(table, indices)?;
        g.reshape(rows, &[indices.len(), self.tokens, self.dim])
    }
}

/// Residual cross-attention `f̃ = f + Softmax(QKᵀ/√d)V` with queries from
/// each pixel of `f` and keys/values from camera tokens.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    dim: usize,
}

impl CrossAttention {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, dim: usize, rng: &mut Rng) -> Self {
        let wq = ps.randn(format!("{name}.wq"), &[channels, dim], 1.0 / (channels as f64).sqrt(), rng);
        let wk = ps.randn(format!("{name}.wk"), &[dim, dim], 1.0 / (dim as f64).sqrt(), rng);
        let wv = ps.randn(format!("{name}.wv"), &[dim, channels], 1.0 / (dim as f64).sqrt(), rng);
        Self { wq, wk, wv, dim }
    }

    pub fn value_weight(&self) -> ParamId {
        self.wv
    }

    pub fn attend(&self, g: &mut Graph, bind: Bind, f: Var, z: Var) -> Result<Var> {
        let fs = g.shape(f).to_vec();
        let zs = g.shape(z).to_vec();
        if fs.len() != 4 || zs.len() != 3 || zs[0] != fs[0] || zs[2] != self.dim {
            return Err(Error::shape(
                "attend_camera",
                format!("features {fs:?} with tokens {zs:?}"),
            ));
        }
        let (b, c, h, w) = (fs[0], fs[1], fs[2], fs[3]);
        let (nt, d) = (zs[1], zs[2]);
        let hw = h * w;
        let f3 = g.reshape(f, &[b, c, hw])?;
        let ft = g.transpose(f3)?;
        let ft2 = g.reshape(ft, &[b * hw, c])?;
        let wq = bind.var(g, self.wq);
        let q = g.matmul(ft2, wq)?;
        let q = g.reshape(q, &[b, hw, d])?;
        let z2 = g.reshape(z, &[b * nt, d])?;
        let wk = bind.var(g, self.wk);
        let k = g.matmul(z2, wk)?;
        let k = g.reshape(k, &[b, nt, d])?;
        let kt = g.transpose(k)?;
        let wv = bind.var(g, self.wv);
        let v = g.matmul(z2, wv)?;
        let v = g.reshape(v, &[b, nt, c])?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax_last(scores)?;
        let o = g.bmm(attn, v)?;
        let ot = g.transpose(o)?;
        let o4 = g.reshape(ot, &[b, c, h, w])?;
        g.add(f, o4)
    }
}

/// Conditioning tensors available to a block.
#[derive(Debug, Clone, Default)]
pub struct BlockContext {
    /// Processed timestep embedding `[B, time_hidden]`.
    pub time: Option<Var>,
    /// Positional embedding per resolution level.
    pub pe: Vec<Var>,
    /// Camera tokens `[B, tokens, dim]`.
    pub camera: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Injections {
    pub time: bool,
    pub positional: bool,
    pub camera: bool,
}

impl Injections {
    pub const NONE: Injections = Injections {
        time: false,
        positional: false,
        camera: false,
    };
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    norm: Norm,
    conv1: Conv,
    time: Option<Linear>,
    pe: Option<Conv>,
    conv2: Conv,
    attn: Option<CrossAttention>,
    level: usize,
}

struct Dims {
    time_hidden: usize,
    pe_dim: usize,
    camera_dim: usize,
}

impl ResBlock {
    fn new(ps: &mut ParamSet, name: &str, ch: usize, level: usize, inj: Injections, dims: &Dims, rng: &mut Rng) -> Self {
        Self {
            norm: Norm::new(ps, &format!("{name}.norm"), ch),
            conv1: Conv::new(ps, &format!("{name}.conv1"), ch, ch, 3, 1, Init::Default, rng),
            time: inj
                .time
                .then(|| Linear::new(ps, &format!("{name}.time"), dims.time_hidden, 2 * ch, Init::Zero, rng)),
            pe: inj
                .positional
                .then(|| Conv::pointwise(ps, &format!("{name}.pe"), dims.pe_dim, 2 * ch, Init::Zero, rng)),
            conv2: Conv::new(ps, &format!("{name}.conv2"), ch, ch, 3, 1, Init::Default, rng),
            attn: inj
                .camera
                .then(|| CrossAttention::new(ps, &format!("{name}.attn"), ch, dims.camera_dim, rng)),
            level,
        }
    }

    fn forward(&self, g: &mut Graph, bind: Bind, x: Var, ctx: &BlockContext) -> Result<Var> {
        let h = self.norm.forward(g, bind, x)?;
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, bind, h)?;
        if let (Some(lin), Some(t)) = (&self.time, ctx.time) {
            let sr = lin.forward(g, bind, t)?;
            let b = g.shape(sr)[0];
            let c2 = g.shape(sr)[1];
            let sr = g.reshape(sr, &[b, c2, 1, 1])?;
            h = film(g, h, sr)?;
        }
        if let (Some(conv), Some(p)) = (&self.pe, ctx.pe.get(self.level)) {
            let sr = conv.forward(g, bind, *p)?;
            h = film(g, h, sr)?;
        }
        let h = g.silu(h);
        let h = self.conv2.forward(g, bind, h)?;
        let mut out = g.add(x, h)?;
        if let (Some(attn), Some(z)) = (&self.attn, ctx.camera) {
            out = attn.attend(g, bind, out, z)?;
        }
        Ok(out)
    }
}

/// Encoder-decoder with skip connections and optional conditioning at
/// every resolution level.
#[derive(Debug, Clone)]
pub struct UNet {
    input: Conv,
    down_blocks: Vec<ResBlock>,
    downsample: Vec<Conv>,
    mid: ResBlock,
    upsample: Vec<Conv>,
    merge: Vec<Conv>,
    up_blocks: Vec<ResBlock>,
    output: Conv,
    depth: usize,
}

impl UNet {
    #[allow(clippy::too_many_arguments)]
    fn build(
        ps: &mut ParamSet,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        base: usize,
        depth: usize,
        inj: Injections,
        dims: &Dims,
        rng: &mut Rng,
    ) -> Self {
        let ch = |l: usize| base << l;
        let input = Conv::new(ps, &format!("{name}.in"), in_ch, base, 3, 1, Init::Default, rng);
        let mut down_blocks = Vec::new();
        let mut downsample = Vec::new();
        for l in 0..depth {
            down_blocks.push(ResBlock::new(ps, &format!("{name}.down{l}"), ch(l), l, inj, dims, rng));
            downsample.push(Conv::new(ps, &format!("{name}.pool{l}"), ch(l), ch(l + 1), 3, 2, Init::Default, rng));
        }
        let mid = ResBlock::new(ps, &format!("{name}.mid"), ch(depth), depth, inj, dims, rng);
        let mut upsample = Vec::new();
        let mut merge = Vec::new();
        let mut up_blocks = Vec::new();
        for l in (0..depth).rev() {
            upsample.push(Conv::new(ps, &format!("{name}.upc{l}"), ch(l + 1), ch(l), 3, 1, Init::Default, rng));
            merge.push(Conv::new(ps, &format!("{name}.merge{l}"), 2 * ch(l), ch(l), 3, 1, Init::Default, rng));
            up_blocks.push(ResBlock::new(ps, &format!("{name}.up{l}"), ch(l), l, inj, dims, rng));
        }
        let output = Conv::new(ps, &format!("{name}.out"), base, out_ch, 3, 1, Init::Zero, rng);
        Self {
            input,
            down_blocks,
            downsample,
            mid,
            upsample,
            merge,
            up_blocks,
            output,
            depth,
        }
    }

    fn forward(&self, g: &mut Graph, bind: Bind, x: Var, ctx: &BlockContext) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let factor = 1usize << self.depth;
        if s.len() != 4 || s[2] % factor != 0 || s[3] % factor != 0 {
            return Err(Error::shape(
                "unet",
                format!("input {s:?} must be NCHW with H, W divisible by {factor}"),
            ));
        }
        let mut h = self.input.forward(g, bind, x)?;
        let mut skips = Vec::with_capacity(self.depth);
        for (block, down) in self.down_blocks.iter().zip(&self.downsample) {
            h = block.forward(g, bind, h, ctx)?;
            skips.push(h);
            h = down.forward(g, bind, h)?;
        }
        h = self.mid.forward(g, bind, h, ctx)?;
        for ((up, merge), block) in self.upsample.iter().zip(&self.merge).zip(&self.up_blocks) {
            let u = g.upsample2x(h)?;
            let u = up.forward(g, bind, u)?;
            let skip = skips.pop().expect("one skip per level");
            let cat = g.concat(&[u, skip], 1)?;
            h = merge.forward(g, bind, cat)?;
            h = block.forward(g, bind, h, ctx)?;
        }
        let h = g.silu(h);
        self.output.forward(g, bind, h)
    }
}

/// Per-pixel branch: 1×1 convolutions only, so each output pixel depends
/// on the inputs at that pixel alone.
#[derive(Debug, Clone, Copy)]
struct MlpBranch {
    l1: Conv,
    attn: CrossAttention,
    l2: Conv,
    time: Linear,
    l3: Conv,
    out: Conv,
}

impl MlpBranch {
    fn new(ps: &mut ParamSet, in_ch: usize, out_ch: usize, hidden: usize, dims: &Dims, rng: &mut Rng) -> Self {
        Self {
            l1: Conv::pointwise(ps, "mlp.l1", in_ch, hidden, Init::Default, rng),
            attn: CrossAttention::new(ps, "mlp.attn", hidden, dims.camera_dim, rng),
            l2: Conv::pointwise(ps, "mlp.l2", hidden, hidden, Init::Default, rng),
            time: Linear::new(ps, "mlp.time", dims.time_hidden, 2 * hidden, Init::Zero, rng),
            l3: Conv::pointwise(ps, "mlp.l3", hidden, hidden, Init::Default, rng),
            out: Conv::pointwise(ps, "mlp.out", hidden, out_ch, Init::Zero, rng),
        }
    }

    fn forward(&self, g: &mut Graph, bind: Bind, x: Var, ctx: &BlockContext) -> Result<Var> {
        let h = self.l1.forward(g, bind, x)?;
        let mut h = g.silu(h);
        if let Some(z) = ctx.camera {
            h = self.attn.attend(g, bind, h, z)?;
        }
        let h = self.l2.forward(g, bind, h)?;
        let h = g.silu(h);
        let mut r = self.l3.forward(g, bind, h)?;
        if let Some(t) = ctx.time {
            let sr = self.time.forward(g, bind, t)?;
            let (b, c2) = (g.shape(sr)[0], g.shape(sr)[1]);
            let sr = g.reshape(sr, &[b, c2, 1, 1])?;
            r = film(g, r, sr)?;
        }
        let r = g.silu(r);
        let h = g.add(h, r)?;
        self.out.forward(g, bind, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    pub mlp: bool,
    pub unet: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoBranchConfig {
    /// Noise (and clean) channels.
    pub channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    pub time_dim: usize,
    pub time_hidden: usize,
    pub pe_dim: usize,
    pub camera_dim: usize,
    pub camera_tokens: usize,
    pub steps: usize,
    pub settings: Vec<CameraSetting>,
    pub branches: Branches,
}

impl TwoBranchConfig {
    pub fn toy(channels: usize, settings: Vec<CameraSetting>, steps: usize) -> Self {
        Self {
            channels,
            base_channels: 16,
            depth: 2,
            mlp_hidden: 32,
            time_dim: 16,
            time_hidden: 32,
            pe_dim: 8,
            camera_dim: 8,
            camera_tokens: 4,
            steps,
            settings,
            branches: Branches { mlp: true, unet: true },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_channels == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even and ≥ 2".into()));
        }
        if !self.branches.mlp && !self.branches.unet {
            return Err(Error::Config("at least one branch must be enabled".into()));
        }
        if self.settings.is_empty() {
            return Err(Error::Config("at least one camera setting is required".into()));
        }
        Ok(())
    }
}

/// Batched conditioning for the two-branch net.
#[derive(Debug, Clone)]
pub struct PatchCond {
    /// `[B, C, H, W]`.
    pub clean: Tensor,
    /// Normalized coordinates `[B, 2, H, W]`.
    pub coords: Tensor,
    /// Bank row per sample.
    pub settings: Vec<usize>,
}

/// Maps absolute `(row, col)` to `[−1, 1]` over the full sensor.
pub fn normalize_coords(abs: &Tensor, sensor: (usize, usize)) -> Result<Tensor> {
    let s = abs.shape();
    if s.len() < 3 || s[s.len() - 3] != 2 {
        return Err(Error::shape("normalize_coords", format!("expected [.., 2, H, W], got {s:?}")));
    }
    let plane = s[s.len() - 2] * s[s.len() - 1];
    let sh = (sensor.0.max(2) - 1) as f64;
    let sw = (sensor.1.max(2) - 1) as f64;
    let data = abs
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let scale = if (i / plane) % 2 == 0 { sh } else { sw };
            2.0 * v / scale - 1.0
        })
        .collect();
    Tensor::new(s, data)
}

/// The ε-predictor: MLP branch plus UNet branch, summed.
#[derive(Debug, Clone)]
pub struct TwoBranchNet {
    config: TwoBranchConfig,
    params: ParamSet,
    time1: Linear,
    time2: Linear,
    pe: PositionalEncoder,
    bank: CameraEmbeddingBank,
    mlp: Option<MlpBranch>,
    unet: Option<UNet>,
}

impl TwoBranchNet {
    pub fn new(config: TwoBranchConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let dims = Dims {
            time_hidden: config.time_hidden,
            pe_dim: config.pe_dim,
            camera_dim: config.camera_dim,
        };
        let time1 = Linear::new(&mut ps, "time.l1", config.time_dim, config.time_hidden, Init::Default, rng);
        let time2 = Linear::new(&mut ps, "time.l2", config.time_hidden, config.time_hidden, Init::Default, rng);
        let pe = PositionalEncoder::new(&mut ps, "pe", config.pe_dim, Init::Default, rng);
        let bank = CameraEmbeddingBank::new(
            &mut ps,
            "camera",
            &config.settings,
            config.camera_tokens,
            config.camera_dim,
            rng,
        )?;
        let c = config.channels;
        let mlp = config
            .branches
            .mlp
            .then(|| MlpBranch::new(&mut ps, 2 * c, c, config.mlp_hidden, &dims, rng));
        let all = Injections {
            time: true,
            positional: true,
            camera: true,
        };
        let unet = config.branches.unet.then(|| {
            UNet::build(&mut ps, "unet", 2 * c, c, config.base_channels, config.depth, all, &dims, rng)
        });
        Ok(Self {
            config,
            params: ps,
            time1,
            time2,
            pe,
            bank,
            mlp,
            unet,
        })
    }

    pub fn config(&self) -> &TwoBranchConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bank(&self) -> &CameraEmbeddingBank {
        &self.bank
    }

    pub fn positional_encoder(&self) -> &PositionalEncoder {
        &self.pe
    }

    fn check(&self, g: &Graph, x: Var, t: &[usize], cond: &PatchCond) -> Result<()> {
        let s = g.shape(x);
        let c = self.config.channels;
        if s.len() != 4 || s[1] != c {
            return Err(Error::shape("predict_eps", format!("noise must be [B, {c}, H, W], got {s:?}")));
        }
        let b = s[0];
        if cond.clean.shape() != s {
            return Err(Error::shape(
                "predict_eps",
                format!("clean {:?} vs noise {s:?}", cond.clean.shape()),
            ));
        }
        if cond.coords.shape() != [b, 2, s[2], s[3]] {
            return Err(Error::shape(
                "predict_eps",
                format!("coords {:?} for noise {s:?}", cond.coords.shape()),
            ));
        }
        if t.len() != b || cond.settings.len() != b {
            return Err(Error::shape(
                "predict_eps",
                format!("batch {b} with {} timesteps and {} settings", t.len(), cond.settings.len()),
            ));
        }
        if let Some(&bad) = cond.settings.iter().find(|&&i| i >= self.bank.settings().len()) {
            return Err(Error::InvalidArgument(format!("camera index {bad} is not registered")));
        }
        Ok(())
    }

    fn context(&self, g: &mut Graph, bind: Bind, t: &[usize], cond: &PatchCond) -> Result<BlockContext> {
        let emb = g.constant(timestep_embedding(t, self.config.steps, self.config.time_dim));
        let h = self.time1.forward(g, bind, emb)?;
        let h = g.silu(h);
        let h = self.time2.forward(g, bind, h)?;
        let time = g.silu(h);
        let coords = g.constant(cond.coords.clone());
        let mut p = self.pe.encode(g, bind, coords)?;
        let mut pe = vec![p];
        let levels = if self.unet.is_some() { self.config.depth } else { 0 };
        for _ in 0..levels {
            p = g.avg_pool2x2(p)?;
            pe.push(p);
        }
        let camera = self.bank.lookup(g, bind, &cond.settings)?;
        Ok(BlockContext {
            time: Some(time),
            pe,
            camera: Some(camera),
        })
    }

    fn input(&self, g: &mut Graph, x: Var, cond: &PatchCond) -> Result<Var> {
        let clean = g.constant(cond.clean.clone());
        g.concat(&[x, clean], 1)
    }

    /// Both branch outputs, `(mlp, unet)`.
    pub fn branch_outputs(
        &self,
        g: &mut Graph,
        bind: Bind,
        x: Var,
        t: &[usize],
        cond: &PatchCond,
    ) -> Result<(Option<Var>, Option<Var>)> {
        self.check(g, x, t, cond)?;
        let ctx = self.context(g, bind, t, cond)?;
        let inp = self.input(g, x, cond)?;
        let m = match &self.mlp {
            Some(b) => Some(b.forward(g, bind, inp, &ctx)?),
            None => None,
        };
        let u = match &self.unet {
            Some(b) => Some(b.forward(g, bind, inp, &ctx)?),
            None => None,
        };
        Ok((m, u))
    }

    /// `ε̂ = mlp(·) + unet(·)`.
    pub fn forward(&self, g: &mut Graph, bind: Bind, x: Var, t: &[usize], cond: &PatchCond) -> Result<Var> {
        match self.branch_outputs(g, bind, x, t, cond)? {
            (Some(m), Some(u)) => g.add(m, u),
            (Some(m), None) => Ok(m),
            (None, Some(u)) => Ok(u),
            (None, None) => unreachable!("validated: one branch enabled"),
        }
    }
}

/// Plain UNet mapping a noisy image to its clean estimate (residual form).
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    config: DenoiserConfig,
    params: ParamSet,
    unet: UNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub base_channels: usize,
    pub depth: usize,
}

impl DenoiserNet {
    pub fn new(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        if config.channels == 0 || config.base_channels == 0 {
            return Err(Error::Config("denoiser channel counts must be positive".into()));
        }
        let mut ps = ParamSet::new();
        let dims = Dims {
            time_hidden: 1,
            pe_dim: 1,
            camera_dim: 1,
        };
        let unet = UNet::build(
            &mut ps,
            "den",
            config.channels,
            config.channels,
            config.base_channels,
            config.depth,
            Injections::NONE,
            &dims,
            rng,
        );
        Ok(Self {
            config,
            params: ps,
            unet,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// `noisy + unet(noisy)`.
    pub fn forward(&self, g: &mut Graph, bind: Bind, noisy: Var) -> Result<Var> {
        let r = self.unet.forward(g, bind, noisy, &BlockContext::default())?;
        g.add(noisy, r)
    }
}
