//! Token-pyramid mean predictor.
//!
//! Latents are channel-major `[C, N]` token matrices. Each encoder level runs
//! one pre-norm attention block; a 2x2 patch merge feeds the next level and a
//! middle block sits at the coarsest one. The decoder mirrors the merges with
//! a linear up-projection plus pixel shuffle, adds the encoder skip and runs a
//! norm + feed-forward residual. The head reads the finest decoder latent
//! together with `x_t` and is zero-initialized, so an untrained model predicts
//! a zero mean.
//!
//! Conditioning enters through [`TapHook`]: after every encoder level and after
//! the middle block the current latent is handed to the hook, which may replace
//! it. The latents returned by [`Denoiser::forward`] are the values before the
//! hook ran.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::grid::Grid;
use crate::math::{self, Real};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tape::{Tape, Var, GATHER_ZERO};

/// Where a latent is exposed to the conditioning hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tap {
    /// Output of encoder level `l` (level 0 is the input resolution).
    Level(usize),
    /// Output of the middle block.
    Middle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapInfo {
    pub tap: Tap,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Parameters of a residual region mixer as placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Mixer {
    /// `[hidden, 2C]`
    pub w1: Var,
    /// `[hidden]`
    pub b1: Var,
    /// `[2C, hidden]`
    pub w2: Var,
}

/// Receives each tapped latent `[C, N]` and returns its replacement.
pub trait TapHook<T: Real> {
    fn apply(
        &mut self,
        tape: &mut Tape<T>,
        index: usize,
        tap: Tap,
        h: Var,
        mixer: Option<Mixer>,
    ) -> Result<Var>;
}

#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    pub mean: Grid,
    /// Pre-hook latents as `[C, h, w]`, in tap order.
    pub taps: Vec<Grid>,
}

/// Anything that predicts the posterior mean `μ_θ(x_t, t)`.
pub trait Denoiser {
    /// `[C, H, W]` of the images the model accepts.
    fn image_shape(&self) -> [usize; 3];

    /// Tap points in the order the hook sees them.
    fn taps(&self) -> Vec<TapInfo>;

    fn forward(
        &self,
        xt: &Grid,
        t: usize,
        hook: Option<&mut dyn TapHook<f32>>,
    ) -> Result<DenoiseOutput>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Token width per pyramid level, finest first.
    pub level_channels: Vec<usize>,
    pub time_dim: usize,
    pub ff_mult: usize,
    /// Hidden width of the two region mixers; 0 builds none.
    pub mixer_hidden: usize,
}

impl DenoiserConfig {
    pub fn new(in_channels: usize, height: usize, width: usize) -> Self {
        Self {
            in_channels,
            height,
            width,
            level_channels: vec![8, 16, 32],
            time_dim: 16,
            ff_mult: 4,
            mixer_hidden: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.level_channels.len();
        if levels == 0 {
            bail!(Config, "at least one pyramid level is required");
        }
        if self.in_channels == 0 || self.height == 0 || self.width == 0 {
            bail!(Config, "image extents must be positive");
        }
        let div = 1usize << (levels - 1);
        if !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) {
            bail!(
                Config,
                "{}x{} image is not divisible by {} for {} levels",
                self.height,
                self.width,
                div,
                levels
            );
        }
        if self.level_channels.iter().any(|&c| c < 2 || c % 2 != 0) {
            bail!(Config, "level widths must be even and at least 2: {:?}", self.level_channels);
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            bail!(Config, "time embedding width must be even, got {}", self.time_dim);
        }
        if self.ff_mult == 0 {
            bail!(Config, "feed-forward multiplier must be positive");
        }
        Ok(())
    }

    fn level_hw(&self, l: usize) -> (usize, usize) {
        (self.height >> l, self.width >> l)
    }
}

/// Sinusoidal embedding of a step: `sin(t f_i)` then `cos(t f_i)` with
/// `f_i = 10000^(-i / (dim/2))`.
pub fn embed_timestep(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = math::exp(-math::ln(10000.0) * i as f64 / half as f64);
        out[i] = math::sin(t as f64 * f);
        out[half + i] = math::cos(t as f64 * f);
    }
    out
}

const POS_AMPLITUDE: f64 = 0.1;

/// Fixed 2-D sinusoidal position code `[C, h*w]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn position_code(channels: usize, h: usize, w: usize) -> Grid {
    let half = channels / 2;
    let pairs = half.div_ceil(2);
    Grid::from_fn(&[channels, h * w], |i| {
        let (c, n) = (i / (h * w), i % (h * w));
        let (axis_c, pos) = if c < half { (c, n / w) } else { (c - half, n % w) };
        let k = axis_c / 2;
        let f = math::exp(-math::ln(100.0) * k as f64 / pairs as f64);
        let v = if axis_c % 2 == 0 {
            math::sin(pos as f64 * f)
        } else {
            math::cos(pos as f64 * f)
        };
        (POS_AMPLITUDE * v) as f32
    })
}

/// Tape handles for one pre-norm attention block.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1: (Var, Var),
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub o: Var,
    pub ln2: (Var, Var),
    pub ff1: (Var, Var),
    pub ff2: (Var, Var),
}

/// Single-head attention `V softmax(QᵀK / √d)ᵀ` on `[C, N]` tokens, before
/// the output projection.
pub fn attend<T: Real>(tape: &mut Tape<T>, a: Var, wq: Var, wk: Var, wv: Var) -> Result<Var> {
    let d = tape.shape(wq)[0];
    let q = tape.matmul(wq, false, a, false)?;
    let q = tape.scale(q, T::from_f64(1.0 / math::sqrt(d as f64)));
    let k = tape.matmul(wk, false, a, false)?;
    let v = tape.matmul(wv, false, a, false)?;
    tape.attention(q, k, v)
}

fn linear<T: Real>(tape: &mut Tape<T>, w: Var, b: Var, x: Var) -> Result<Var> {
    let y = tape.matmul(w, false, x, false)?;
    tape.add_channel(y, b)
}

fn feed_forward<T: Real>(tape: &mut Tape<T>, x: Var, ff1: (Var, Var), ff2: (Var, Var)) -> Result<Var> {
    let h = linear(tape, ff1.0, ff1.1, x)?;
    let h = tape.silu(h);
    linear(tape, ff2.0, ff2.1, h)
}

/// `x + O·attend(LN1 x)`, then `+ FF(LN2 ·)`.
pub fn attention_block<T: Real>(tape: &mut Tape<T>, x: Var, b: &BlockVars) -> Result<Var> {
    let a = tape.layer_norm(x, b.ln1.0, b.ln1.1)?;
    let att = attend(tape, a, b.q, b.k, b.v)?;
    let att = tape.matmul(b.o, false, att, false)?;
    let x = tape.add(x, att)?;
    let f = tape.layer_norm(x, b.ln2.0, b.ln2.1)?;
    let f = feed_forward(tape, f, b.ff1, b.ff2)?;
    tape.add(x, f)
}

#[derive(Debug, Clone, Copy)]
struct BlockSlots {
    ln1: (usize, usize),
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    ln2: (usize, usize),
    ff1: (usize, usize),
    ff2: (usize, usize),
}

impl BlockSlots {
    fn bind(&self, p: &[Var]) -> BlockVars {
        BlockVars {
            ln1: (p[self.ln1.0], p[self.ln1.1]),
            q: p[self.q],
            k: p[self.k],
            v: p[self.v],
            o: p[self.o],
            ln2: (p[self.ln2.0], p[self.ln2.1]),
            ff1: (p[self.ff1.0], p[self.ff1.1]),
            ff2: (p[self.ff2.0], p[self.ff2.1]),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct DecoderSlots {
    up: (usize, usize),
    ln: (usize, usize),
    ff1: (usize, usize),
    ff2: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
struct MixerSlots {
    w1: usize,
    b1: usize,
    w2: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: (usize, usize),
    time: Vec<(usize, usize)>,
    enc: Vec<BlockSlots>,
    merge: Vec<(usize, usize)>,
    mid: BlockSlots,
    dec: Vec<DecoderSlots>,
    head: (usize, usize),
    /// Mixer for the input-level tap and for the middle tap.
    mixers: [Option<MixerSlots>; 2],
}

const INIT_STD: f64 = 0.02;

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut SeededRng,
}

impl Builder<'_> {
    fn weight(&mut self, name: &str, rows: usize, cols: usize) -> Result<usize> {
        let rng = &mut *self.rng;
        let g = Grid::from_fn(&[rows, cols], |_| loop {
            let z = rng.normal();
            if z.abs() <= 2.0 {
                break (z * INIT_STD) as f32;
            }
        });
        self.store.push(name, g)
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<usize> {
        self.store.push(name, Grid::zeros(shape))
    }

    fn ones(&mut self, name: &str, n: usize) -> Result<usize> {
        self.store.push(name, Grid::full(&[n], 1.0))
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> Result<(usize, usize)> {
        Ok((
            self.weight(&format!("{name}.w"), out, inp)?,
            self.zeros(&format!("{name}.b"), &[out])?,
        ))
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<(usize, usize)> {
        Ok((self.ones(&format!("{name}.g"), c)?, self.zeros(&format!("{name}.b"), &[c])?))
    }

    fn block(&mut self, name: &str, c: usize, mult: usize) -> Result<BlockSlots> {
        Ok(BlockSlots {
            ln1: self.norm(&format!("{name}.ln1"), c)?,
            q: self.weight(&format!("{name}.attn.q"), c, c)?,
            k: self.weight(&format!("{name}.attn.k"), c, c)?,
            v: self.weight(&format!("{name}.attn.v"), c, c)?,
            o: self.weight(&format!("{name}.attn.o"), c, c)?,
            ln2: self.norm(&format!("{name}.ln2"), c)?,
            ff1: self.linear(&format!("{name}.ff1"), mult * c, c)?,
            ff2: self.linear(&format!("{name}.ff2"), c, mult * c)?,
        })
    }

    fn mixer(&mut self, name: &str, c: usize, hidden: usize) -> Result<MixerSlots> {
        Ok(MixerSlots {
            w1: self.weight(&format!("{name}.w1"), hidden, 2 * c)?,
            b1: self.zeros(&format!("{name}.b1"), &[hidden])?,
            w2: self.zeros(&format!("{name}.w2"), &[2 * c, hidden])?,
        })
    }
}

/// Name prefix of the region-mixer parameters.
pub const MIXER_PREFIX: &str = "ep.";

/// Upper bound on the share of parameters held by the region mixers.
pub const MIXER_SHARE_LIMIT: f64 = 0.01;

/// The token-pyramid denoiser.
#[derive(Debug, Clone)]
pub struct TptDenoiser {
    cfg: DenoiserConfig,
    params: ParamStore,
    layout: Layout,
    stem_index: Arc<[u32]>,
    merge_index: Vec<Arc<[u32]>>,
    shuffle_index: Vec<Arc<[u32]>>,
    pos: Vec<Grid>,
}

/// Column matrix `[C*9, H*W]` of 3x3 neighbourhoods with zero padding.
fn im2col_index(c: usize, h: usize, w: usize) -> Arc<[u32]> {
    let mut idx = Vec::with_capacity(c * 9 * h * w);
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let (sy, sx) = (y as isize + ky - 1, x as isize + kx - 1);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            idx.push(GATHER_ZERO);
                        } else {
                            idx.push((ch * h * w + sy as usize * w + sx as usize) as u32);
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// `[C, h*w]` → `[4C, h/2 * w/2]`; row `q*C + c` holds sub-pixel `q = 2dy + dx`.
fn merge_index(c: usize, h: usize, w: usize) -> Arc<[u32]> {
    let (h2, w2) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(4 * c * h2 * w2);
    for q in 0..4 {
        let (dy, dx) = (q / 2, q % 2);
        for ch in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    idx.push((ch * h * w + (2 * y + dy) * w + 2 * x + dx) as u32);
                }
            }
        }
    }
    idx.into()
}

/// Inverse of [`merge_index`]: `[4C, h/2 * w/2]` → `[C, h*w]`.
fn shuffle_index(c: usize, h: usize, w: usize) -> Arc<[u32]> {
    let (h2, w2) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let q = (y % 2) * 2 + x % 2;
                idx.push(((q * c + ch) * h2 * w2 + (y / 2) * w2 + x / 2) as u32);
            }
        }
    }
    idx.into()
}

/// Tape handles produced by [`TptDenoiser::forward_on`].
#[derive(Debug, Clone)]
pub struct TapeForward {
    /// `[C, H, W]`
    pub mean: Var,
    /// Pre-hook latents `[C, N]` in tap order.
    pub taps: Vec<Var>,
}

impl TptDenoiser {
    pub fn new(cfg: DenoiserConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.level_channels.len();
        let ch = &cfg.level_channels;
        let mut b = Builder {
            store: ParamStore::new(),
            rng,
        };
        let stem = b.linear("stem", ch[0], cfg.in_channels * 9)?;
        let mut time = Vec::with_capacity(levels);
        let mut enc = Vec::with_capacity(levels);
        let mut merge = Vec::with_capacity(levels - 1);
        for l in 0..levels {
            if l > 0 {
                merge.push(b.linear(&format!("merge.{}", l - 1), ch[l], 4 * ch[l - 1])?);
            }
            time.push(b.linear(&format!("time.{l}"), ch[l], cfg.time_dim)?);
            enc.push(b.block(&format!("enc.{l}"), ch[l], cfg.ff_mult)?);
        }
        let mid = b.block("mid", ch[levels - 1], cfg.ff_mult)?;
        let mut dec = Vec::with_capacity(levels - 1);
        for l in 0..levels - 1 {
            let c = ch[l];
            dec.push(DecoderSlots {
                up: b.linear(&format!("up.{l}"), 4 * c, ch[l + 1])?,
                ln: b.norm(&format!("dec.{l}.ln"), c)?,
                ff1: b.linear(&format!("dec.{l}.ff1"), cfg.ff_mult * c, c)?,
                ff2: b.linear(&format!("dec.{l}.ff2"), c, cfg.ff_mult * c)?,
            });
        }
        let head = (
            b.zeros("head.w", &[cfg.in_channels, ch[0] + cfg.in_channels])?,
            b.zeros("head.b", &[cfg.in_channels])?,
        );
        let mixers = if cfg.mixer_hidden > 0 {
            [
                Some(b.mixer(&format!("{MIXER_PREFIX}input"), ch[0], cfg.mixer_hidden)?),
                Some(b.mixer(&format!("{MIXER_PREFIX}middle"), ch[levels - 1], cfg.mixer_hidden)?),
            ]
        } else {
            [None, None]
        };
        let params = b.store;
        let layout = Layout {
            stem,
            time,
            enc,
            merge,
            mid,
            dec,
            head,
            mixers,
        };
        let model = Self {
            stem_index: im2col_index(cfg.in_channels, cfg.height, cfg.width),
            merge_index: (0..levels - 1)
                .map(|l| {
                    let (h, w) = cfg.level_hw(l);
                    merge_index(ch[l], h, w)
                })
                .collect(),
            shuffle_index: (0..levels - 1)
                .map(|l| {
                    let (h, w) = cfg.level_hw(l);
                    shuffle_index(ch[l], h, w)
                })
                .collect(),
            pos: (0..levels)
                .map(|l| {
                    let (h, w) = cfg.level_hw(l);
                    position_code(ch[l], h, w)
                })
                .collect(),
            cfg,
            params,
            layout,
        };
        let share = model.mixer_share();
        if share >= MIXER_SHARE_LIMIT {
            bail!(
                Config,
                "region mixers hold {:.2}% of the parameters, limit is {:.0}%",
                share * 100.0,
                MIXER_SHARE_LIMIT * 100.0
            );
        }
        Ok(model)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Fraction of scalar parameters that belong to the region mixers.
    pub fn mixer_share(&self) -> f64 {
        self.params.count_prefix(MIXER_PREFIX) as f64 / self.params.count() as f64
    }

    pub fn has_mixers(&self) -> bool {
        self.layout.mixers[0].is_some()
    }

    fn tap_list(&self) -> Vec<TapInfo> {
        let levels = self.cfg.level_channels.len();
        let mut out: Vec<TapInfo> = (0..levels)
            .map(|l| {
                let (h, w) = self.cfg.level_hw(l);
                TapInfo {
                    tap: Tap::Level(l),
                    channels: self.cfg.level_channels[l],
                    height: h,
                    width: w,
                }
            })
            .collect();
        let last = out[levels - 1];
        out.push(TapInfo {
            tap: Tap::Middle,
            ..last
        });
        out
    }

    fn check_input(&self, xt: &Grid) -> Result<()> {
        let want = [self.cfg.in_channels, self.cfg.height, self.cfg.width];
        if xt.shape() != want {
            bail!(Shape, "denoiser expects {:?}, got {:?}", want, xt.shape());
        }
        Ok(())
    }

    /// Records the forward pass on `tape` with parameters `p` (as returned by
    /// [`ParamStore::bind`] on [`Self::params`]).
    pub fn forward_on<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        xt: &Grid,
        t: usize,
        mut hook: Option<&mut dyn TapHook<T>>,
    ) -> Result<TapeForward> {
        self.check_input(xt)?;
        if p.len() != self.params.len() {
            bail!(Shape, "{} parameter handles for {} tensors", p.len(), self.params.len());
        }
        let cfg = &self.cfg;
        let ly = &self.layout;
        let levels = cfg.level_channels.len();
        let n0 = cfg.height * cfg.width;

        let x_in = tape.constant(xt);
        let x_tok = tape.reshape(x_in, &[cfg.in_channels, n0])?;
        let emb: Vec<T> = embed_timestep(t, cfg.time_dim).into_iter().map(T::from_f64).collect();
        let emb = tape.constant_raw(&[cfg.time_dim, 1], emb);

        let mut taps = Vec::with_capacity(levels + 1);
        let mut skips = Vec::with_capacity(levels);
        let mut prev_h: Option<Var> = None;
        for l in 0..levels {
            let (hh, ww) = cfg.level_hw(l);
            let c = cfg.level_channels[l];
            let x = if l == 0 {
                let cols = tape.gather(x_tok, self.stem_index.clone(), &[cfg.in_channels * 9, n0])?;
                linear(tape, p[ly.stem.0], p[ly.stem.1], cols)?
            } else {
                let prev = cfg.level_channels[l - 1];
                let below = prev_h.expect("finer level recorded");
                let m = tape.gather(below, self.merge_index[l - 1].clone(), &[4 * prev, hh * ww])?;
                let (w, b) = ly.merge[l - 1];
                linear(tape, p[w], p[b], m)?
            };
            let te = linear(tape, p[ly.time[l].0], p[ly.time[l].1], emb)?;
            let te = tape.reshape(te, &[c])?;
            let x = tape.add_channel(x, te)?;
            let pos = tape.constant(&self.pos[l]);
            let x = tape.add(x, pos)?;
            let x = attention_block(tape, x, &ly.enc[l].bind(p))?;
            taps.push(x);
            let h = match hook.as_deref_mut() {
                Some(hk) => {
                    let mixer = if l == 0 { self.mixer_vars(0, p) } else { None };
                    hk.apply(tape, l, Tap::Level(l), x, mixer)?
                }
                None => x,
            };
            skips.push(h);
            prev_h = Some(h);
        }
        let x = attention_block(tape, skips[levels - 1], &ly.mid.bind(p))?;
        taps.push(x);
        let mut h = match hook {
            Some(hk) => hk.apply(tape, levels, Tap::Middle, x, self.mixer_vars(1, p))?,
            None => x,
        };
        for l in (0..levels - 1).rev() {
            let c = cfg.level_channels[l];
            let d = &ly.dec[l];
            let u = linear(tape, p[d.up.0], p[d.up.1], h)?;
            let u = tape.gather(u, self.shuffle_index[l].clone(), &[c, (cfg.height >> l) * (cfg.width >> l)])?;
            let x = tape.add(u, skips[l])?;
            let f = tape.layer_norm(x, p[d.ln.0], p[d.ln.1])?;
            let f = feed_forward(tape, f, (p[d.ff1.0], p[d.ff1.1]), (p[d.ff2.0], p[d.ff2.1]))?;
            h = tape.add(x, f)?;
        }
        let cat = tape.concat(h, x_tok)?;
        let out = linear(tape, p[ly.head.0], p[ly.head.1], cat)?;
        let mean = tape.reshape(out, &[cfg.in_channels, cfg.height, cfg.width])?;
        Ok(TapeForward { mean, taps })
    }

    fn mixer_vars(&self, site: usize, p: &[Var]) -> Option<Mixer> {
        self.layout.mixers[site].map(|m| Mixer {
            w1: p[m.w1],
            b1: p[m.b1],
            w2: p[m.w2],
        })
    }

    /// Converts `[C, N]` tap latents into `[C, h, w]` grids.
    pub fn tap_grids<T: Real>(&self, tape: &Tape<T>, taps: &[Var]) -> Result<Vec<Grid>> {
        self.tap_list()
            .iter()
            .zip(taps)
            .map(|(info, &v)| tape.grid(v).reshape(&[info.channels, info.height, info.width]))
            .collect()
    }
}

impl Denoiser for TptDenoiser {
    fn image_shape(&self) -> [usize; 3] {
        [self.cfg.in_channels, self.cfg.height, self.cfg.width]
    }

    fn taps(&self) -> Vec<TapInfo> {
        self.tap_list()
    }

    fn forward(
        &self,
        xt: &Grid,
        t: usize,
        hook: Option<&mut dyn TapHook<f32>>,
    ) -> Result<DenoiseOutput> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.forward_on(&mut tape, &p, xt, t, hook)?;
        let mean = tape.grid(out.mean);
        if !mean.all_finite() {
            return Err(crate::Error::NonFinite(format!("denoiser output at step {t}")));
        }
        Ok(DenoiseOutput {
            mean,
            taps: self.tap_grids(&tape, &out.taps)?,
        })
    }
}

/// Human-readable parameter summary, one line per tensor.
pub fn describe_params(store: &ParamStore) -> String {
    let mut s = String::new();
    for (name, g) in store.iter() {
        s.push_str(&format!("{name}\t{:?}\n", g.shape()));
    }
    s
}
