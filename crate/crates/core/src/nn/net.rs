use rand::Rng as _;

use super::ops::{self, ConvGeom};
use super::Scalar;
use crate::heads::{ActionMaps, CHANNELS, N_GAUSS, LOG_STD_INIT};
use crate::{Error, Result};

/// One encoder stage: stride-2 convolution followed by ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub out: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Descriptor {
    pub name: String,
    pub res: usize,
    pub stages: Vec<StageSpec>,
    pub branch_hidden: usize,
    pub value_head: bool,
}

/// Output channels of the position, attention, rpy and finger branches.
pub const BRANCH_OUT: [usize; 4] = [1, 2, 3, 4];
pub const BRANCH_NAMES: [&str; 4] = ["pos", "att", "rpy", "fin"];
const UP_K: usize = 4;

impl Descriptor {
    pub fn toy16() -> Self {
        Self {
            name: "toy16".into(),
            res: 16,
            stages: vec![StageSpec { out: 4, k: 3 }, StageSpec { out: 5, k: 3 }],
            branch_hidden: 3,
            value_head: false,
        }
    }

    pub fn default64() -> Self {
        Self {
            name: "default64".into(),
            res: 64,
            stages: vec![
                StageSpec { out: 8, k: 5 },
                StageSpec { out: 16, k: 3 },
                StageSpec { out: 32, k: 3 },
                StageSpec { out: 32, k: 3 },
            ],
            branch_hidden: 8,
            value_head: false,
        }
    }

    pub fn paper224() -> Self {
        Self {
            name: "paper224".into(),
            res: 224,
            stages: vec![
                StageSpec { out: 32, k: 9 },
                StageSpec { out: 64, k: 5 },
                StageSpec { out: 64, k: 3 },
                StageSpec { out: 64, k: 3 },
            ],
            branch_hidden: 32,
            value_head: false,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy16" | "toy" => Ok(Self::toy16()),
            "default64" | "default" => Ok(Self::default64()),
            "paper224" => Ok(Self::paper224()),
            _ => Err(Error::config("net", format!("unknown preset `{name}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stages.len();
        if n == 0 {
            return Err(Error::Shape("descriptor needs at least one stage".into()));
        }
        if self.res % (1 << n) != 0 {
            return Err(Error::Shape(format!("res {} not divisible by 2^{n}", self.res)));
        }
        if self.stages.iter().any(|s| s.k % 2 == 0 || s.out == 0) || self.branch_hidden == 0 {
            return Err(Error::Shape("kernels must be odd and channels positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let stages: Vec<String> = self.stages.iter().map(|s| format!("{}x{}", s.out, s.k)).collect();
        format!(
            "name={} res={} stages={} hidden={} value={}",
            self.name,
            self.res,
            stages.join(","),
            self.branch_hidden,
            self.value_head as u8
        )
    }

    pub fn from_text(s: &str) -> Result<Self> {
        let bad = |m: &str| Error::CorruptCheckpoint(format!("descriptor: {m}"));
        let mut d = Descriptor {
            name: String::new(),
            res: 0,
            stages: Vec::new(),
            branch_hidden: 0,
            value_head: false,
        };
        for tok in s.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| bad(tok))?;
            match k {
                "name" => d.name = v.to_string(),
                "res" => d.res = v.parse().map_err(|_| bad(tok))?,
                "hidden" => d.branch_hidden = v.parse().map_err(|_| bad(tok))?,
                "value" => d.value_head = v == "1",
                "stages" => {
                    for st in v.split(',') {
                        let (o, k) = st.split_once('x').ok_or_else(|| bad(st))?;
                        d.stages.push(StageSpec {
                            out: o.parse().map_err(|_| bad(st))?,
                            k: k.parse().map_err(|_| bad(st))?,
                        });
                    }
                }
                _ => return Err(bad(tok)),
            }
        }
        d.validate().map_err(|e| bad(&e.to_string()))?;
        Ok(d)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
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

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    enc: Vec<(usize, usize)>,
    lat: Vec<(usize, usize)>,
    branch: [(usize, usize, usize, usize); 4],
    value: Option<(usize, usize)>,
    log_std: usize,
}

/// Network input: a normalized depth plane plus the composed zoom scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub res: usize,
    pub plane: Vec<f64>,
    pub scale: f64,
}

/// Parameters of the whole network, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub desc: Descriptor,
    pub specs: Vec<ParamSpec>,
    pub params: Vec<T>,
    layout: Layout,
}

/// Activations recorded by `forward` for `backward`.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    input: Vec<T>,
    scale: T,
    enc: Vec<Vec<T>>,
    fused: Vec<Vec<T>>,
    hidden: Vec<Vec<T>>,
    sizes: Vec<usize>,
    pub value: Option<T>,
}

impl<T: Scalar> Cache<T> {
    /// Positivity pattern of every ReLU output.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.enc
            .iter()
            .chain(self.hidden.iter())
            .flat_map(|v| v.iter().map(|x| *x > T::zero()))
            .collect()
    }
}

pub struct Gradients<T> {
    pub params: Vec<T>,
    pub input: Vec<T>,
    pub scale: T,
}

fn build_specs(desc: &Descriptor) -> (Vec<ParamSpec>, Layout) {
    let mut specs: Vec<ParamSpec> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| {
        let offset = specs.last().map(|s| s.offset + s.len()).unwrap_or(0);
        specs.push(ParamSpec { name, shape, offset });
        specs.len() - 1
    };
    let mut layout = Layout {
        enc: Vec::new(),
        lat: Vec::new(),
        branch: [(0, 0, 0, 0); 4],
        value: None,
        log_std: 0,
    };
    let mut cin = 1;
    for (i, st) in desc.stages.iter().enumerate() {
        let w = push(format!("enc{i}.w"), vec![st.out, cin, st.k, st.k]);
        let b = push(format!("enc{i}.b"), vec![st.out]);
        layout.enc.push((w, b));
        cin = st.out;
    }
    for i in 0..desc.stages.len() - 1 {
        let fine = desc.stages[i].out;
        let coarse = desc.stages[i + 1].out;
        let w = push(format!("lat{i}.w"), vec![fine, coarse, 1, 1]);
        let b = push(format!("lat{i}.b"), vec![fine]);
        layout.lat.push((w, b));
    }
    let c0 = desc.stages[0].out + 1;
    let h = desc.branch_hidden;
    for (bi, (name, out)) in BRANCH_NAMES.iter().zip(BRANCH_OUT).enumerate() {
        let cw = push(format!("{name}.conv.w"), vec![h, c0, 3, 3]);
        let cb = push(format!("{name}.conv.b"), vec![h]);
        let uw = push(format!("{name}.up.w"), vec![h, out, UP_K, UP_K]);
        let ub = push(format!("{name}.up.b"), vec![out]);
        layout.branch[bi] = (cw, cb, uw, ub);
    }
    if desc.value_head {
        let last = desc.stages.last().unwrap().out;
        let w = push("value.w".into(), vec![last + 1]);
        let b = push("value.b".into(), vec![1]);
        layout.value = Some((w, b));
    }
    layout.log_std = push("log_std".into(), vec![N_GAUSS]);
    (specs, layout)
}

impl<T: Scalar> Network<T> {
    pub fn zeros(desc: &Descriptor) -> Result<Self> {
        desc.validate()?;
        let (specs, layout) = build_specs(desc);
        let n = specs.last().map(|s| s.offset + s.len()).unwrap_or(0);
        Ok(Self {
            desc: desc.clone(),
            specs,
            params: vec![T::zero(); n],
            layout,
        })
    }

    /// Uniform fan-in initialization for kernels, zero biases, log_std -1.
    /// `head_gain` shrinks the last layer of each branch.
    pub fn init(desc: &Descriptor, seed: u64, head_gain: f64) -> Result<Self> {
        let mut net = Self::zeros(desc)?;
        let mut rng = crate::rng::from_seed(crate::rng::derive(seed, crate::rng::stream::INIT));
        let up: Vec<usize> = net.layout.branch.iter().map(|b| b.2).collect();
        for (idx, spec) in net.specs.iter().enumerate() {
            let r = spec.range();
            if spec.name == "log_std" {
                net.params[r].fill(T::of(LOG_STD_INIT));
                continue;
            }
            if spec.shape.len() < 4 && !spec.name.ends_with(".w") {
                continue;
            }
            let (fan_in, gain) = if up.contains(&idx) {
                (spec.shape[0] * UP_K * UP_K / 4, head_gain)
            } else if spec.shape.len() == 4 {
                (spec.shape[1] * spec.shape[2] * spec.shape[3], 1.0)
            } else {
                (spec.shape[0], 1.0)
            };
            let bound = (6.0 / fan_in as f64).sqrt() * gain.min(1.0);
            for v in &mut net.params[r] {
                *v = T::of(rng.gen_range(-bound..=bound));
            }
        }
        Ok(net)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    fn p(&self, idx: usize) -> &[T] {
        &self.params[self.specs[idx].range()]
    }

    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.specs.iter().find(|s| s.name == name).map(|s| &self.params[s.range()])
    }

    pub fn log_std(&self) -> [f64; N_GAUSS] {
        let s = self.p(self.layout.log_std);
        std::array::from_fn(|k| s[k].f64())
    }

    pub fn log_std_offset(&self) -> usize {
        self.specs[self.layout.log_std].offset
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            desc: self.desc.clone(),
            specs: self.specs.clone(),
            params: self.params.iter().map(|v| U::of(v.f64())).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn set_params(&mut self, values: Vec<T>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Shape(format!("expected {} params, got {}", self.params.len(), values.len())));
        }
        self.params = values;
        Ok(())
    }

    fn stage_geom(&self, i: usize) -> ConvGeom {
        let cin = if i == 0 { 1 } else { self.desc.stages[i - 1].out };
        let h = self.desc.res >> i;
        let k = self.desc.stages[i].k;
        ConvGeom { channels: cin, h, w: h, k, stride: 2, pad: (k - 1) / 2 }
    }

    fn lat_geom(&self, i: usize) -> ConvGeom {
        let h = self.desc.res >> (i + 2);
        ConvGeom { channels: self.desc.stages[i + 1].out, h, w: h, k: 1, stride: 1, pad: 0 }
    }

    fn branch_geom(&self) -> ConvGeom {
        let h = self.desc.res / 2;
        ConvGeom { channels: self.desc.stages[0].out + 1, h, w: h, k: 3, stride: 1, pad: 1 }
    }

    /// Geometry of the conv that the upsampling layer is the transpose of.
    fn up_geom(&self, out: usize) -> ConvGeom {
        let r = self.desc.res;
        ConvGeom { channels: out, h: r, w: r, k: UP_K, stride: 2, pad: 1 }
    }

    pub fn forward(&self, obs: &Observation) -> Result<(ActionMaps, Cache<T>)> {
        let r = self.desc.res;
        if obs.res != r || obs.plane.len() != r * r {
            return Err(Error::Shape(format!("observation {}x{} vs network res {r}", obs.res, obs.res)));
        }
        let input: Vec<T> = obs.plane.iter().map(|v| T::of(*v)).collect();
        let scale = T::of(obs.scale);
        let mut scratch = Vec::new();
        let n = self.desc.stages.len();

        let mut enc: Vec<Vec<T>> = Vec::with_capacity(n);
        for i in 0..n {
            let (w, b) = self.layout.enc[i];
            let x = if i == 0 { &input } else { &enc[i - 1] };
            let mut y = ops::conv2d(&self.stage_geom(i), x, self.p(w), self.p(b), self.desc.stages[i].out, &mut scratch);
            ops::relu(&mut y);
            check(&y, "encoder")?;
            enc.push(y);
        }

        let mut fused = vec![enc[n - 1].clone()];
        for i in (0..n - 1).rev() {
            let f = self.pyramid(i, &enc[i], &fused[0], &mut scratch)?;
            fused.insert(0, f);
        }

        let bg = self.branch_geom();
        let hw = bg.h * bg.w;
        let mut u = fused[0].clone();
        u.extend(std::iter::repeat(scale).take(hw));

        let mut maps = Vec::with_capacity(CHANNELS * r * r);
        let mut hidden = Vec::with_capacity(4);
        for (bi, out) in BRANCH_OUT.iter().enumerate() {
            let (cw, cb, uw, ub) = self.layout.branch[bi];
            let mut h = ops::conv2d(&bg, &u, self.p(cw), self.p(cb), self.desc.branch_hidden, &mut scratch);
            ops::relu(&mut h);
            let m = ops::conv_transpose(&self.up_geom(*out), &h, self.desc.branch_hidden, self.p(uw), self.p(ub));
            check(&m, BRANCH_NAMES[bi])?;
            maps.extend(m.iter().map(|v| v.f64()));
            hidden.push(h);
        }

        let value = self.layout.value.map(|(w, b)| {
            let last = &enc[n - 1];
            let c = self.desc.stages[n - 1].out;
            let plane = last.len() / c;
            let w = self.p(w);
            let mut v = self.p(b)[0] + w[c] * scale;
            for ch in 0..c {
                let mean = last[ch * plane..(ch + 1) * plane].iter().fold(T::zero(), |a, &x| a + x) / T::of(plane as f64);
                v = v + w[ch] * mean;
            }
            v
        });

        let cache = Cache {
            input,
            scale,
            enc,
            fused,
            hidden,
            sizes: (0..n).map(|i| r >> (i + 1)).collect(),
            value,
        };
        Ok((ActionMaps { res: r, data: maps }, cache))
    }

    fn pyramid(&self, i: usize, fine: &[T], coarse: &[T], scratch: &mut Vec<T>) -> Result<Vec<T>> {
        let g = self.lat_geom(i);
        let (w, b) = self.layout.lat[i];
        let fine_h = self.desc.res >> (i + 1);
        ops::pyramid_block(fine, self.desc.stages[i].out, fine_h, coarse, &g, self.p(w), self.p(b), scratch)
    }

    /// Reverse pass. `dmaps` is dL/d(pre-activation maps) in channel-major
    /// order; `dvalue` is dL/d(value output).
    pub fn backward(&self, cache: &Cache<T>, dmaps: &[T], dvalue: T) -> Result<Gradients<T>> {
        let r = self.desc.res;
        let n = self.desc.stages.len();
        if dmaps.len() != CHANNELS * r * r || cache.enc.len() != n || cache.sizes.first() != Some(&(r / 2)) {
            return Err(Error::Shape("cache or upstream gradient does not match network".into()));
        }
        let mut g = vec![T::zero(); self.params.len()];
        let mut scratch = Vec::new();
        let bg = self.branch_geom();
        let hw = bg.h * bg.w;
        let hid = self.desc.branch_hidden;
        let mut u = cache.fused[0].clone();
        u.extend(std::iter::repeat(cache.scale).take(hw));

        let mut du = vec![T::zero(); u.len()];
        let mut off = 0;
        for (bi, out) in BRANCH_OUT.iter().enumerate() {
            let (cw, cb, uw, ub) = self.layout.branch[bi];
            let len = out * r * r;
            let dm = &dmaps[off..off + len];
            off += len;
            let (gw, gb) = split2(&mut g, &self.specs[uw], &self.specs[ub]);
            let mut dh = ops::conv_transpose_backward(&self.up_geom(*out), &cache.hidden[bi], hid, self.p(uw), dm, gw, gb, true, &mut scratch).unwrap();
            ops::relu_backward(&cache.hidden[bi], &mut dh);
            let (gw, gb) = split2(&mut g, &self.specs[cw], &self.specs[cb]);
            let dx = ops::conv2d_backward(&bg, &u, self.p(cw), hid, &dh, gw, gb, true, &mut scratch).unwrap();
            for (a, b) in du.iter_mut().zip(&dx) {
                *a = *a + *b;
            }
        }
        let c0 = self.desc.stages[0].out;
        let mut dscale = du[c0 * hw..].iter().fold(T::zero(), |a, &v| a + v);
        du.truncate(c0 * hw);

        // Pyramid, fine to coarse: df[i] = dL/d(fused_i).
        let mut df: Vec<Vec<T>> = vec![du];
        for i in 0..n - 1 {
            let lg = self.lat_geom(i);
            let c_fine = self.desc.stages[i].out;
            let dproj = ops::upsample2_backward(&df[i], c_fine, lg.h, lg.w);
            let coarse = &cache.fused[i + 1];
            let (lw, lb) = self.layout.lat[i];
            let (gw, gb) = split2(&mut g, &self.specs[lw], &self.specs[lb]);
            let dc = ops::conv2d_backward(&lg, coarse, self.p(lw), c_fine, &dproj, gw, gb, true, &mut scratch).unwrap();
            df.push(dc);
        }

        if let Some((vw, vb)) = self.layout.value {
            let last = &cache.enc[n - 1];
            let c = self.desc.stages[n - 1].out;
            let plane = last.len() / c;
            let inv = T::of(1.0 / plane as f64);
            let w: Vec<T> = self.p(vw).to_vec();
            let go = self.specs[vw].offset;
            for ch in 0..c {
                let mean = last[ch * plane..(ch + 1) * plane].iter().fold(T::zero(), |a, &x| a + x) * inv;
                g[go + ch] = g[go + ch] + dvalue * mean;
                for d in &mut df[n - 1][ch * plane..(ch + 1) * plane] {
                    *d = *d + dvalue * w[ch] * inv;
                }
            }
            g[go + c] = g[go + c] + dvalue * cache.scale;
            let bo = self.specs[vb].offset;
            g[bo] = g[bo] + dvalue;
            dscale = dscale + dvalue * w[c];
        }

        // Encoder, coarse to fine.
        let mut de = df.pop().unwrap();
        let mut dinput = Vec::new();
        for i in (0..n).rev() {
            ops::relu_backward(&cache.enc[i], &mut de);
            let (w, b) = self.layout.enc[i];
            let x = if i == 0 { &cache.input } else { &cache.enc[i - 1] };
            let (gw, gb) = split2(&mut g, &self.specs[w], &self.specs[b]);
            let dx = ops::conv2d_backward(&self.stage_geom(i), x, self.p(w), self.desc.stages[i].out, &de, gw, gb, true, &mut scratch).unwrap();
            if i == 0 {
                dinput = dx;
            } else {
                let mut next = df.pop().unwrap();
                for (a, b) in next.iter_mut().zip(&dx) {
                    *a = *a + *b;
                }
                de = next;
            }
        }
        Ok(Gradients {
            params: g,
            input: dinput,
            scale: dscale,
        })
    }
}

fn split2<'a, T>(g: &'a mut [T], w: &ParamSpec, b: &ParamSpec) -> (&'a mut [T], &'a mut [T]) {
    debug_assert_eq!(w.offset + w.len(), b.offset);
    let (head, tail) = g[w.offset..].split_at_mut(w.len());
    (head, &mut tail[..b.len()])
}

fn check<T: Scalar>(v: &[T], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} activation")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(res: usize, scale: f64, seed: u64) -> Observation {
        let mut rng = crate::rng::from_seed(seed);
        Observation {
            res,
            plane: (0..res * res).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            scale,
        }
    }

    #[test]
    fn zero_network_gives_zero_maps() {
        let net: Network<f64> = Network::zeros(&Descriptor::toy16()).unwrap();
        let o = Observation { res: 16, plane: vec![0.0; 256], scale: 1.0 };
        let (maps, _) = net.forward(&o).unwrap();
        assert_eq!(maps.data.len(), 10 * 256);
        assert!(maps.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scale_plane_changes_outputs() {
        let net: Network<f64> = Network::init(&Descriptor::toy16(), 3, 1.0).unwrap();
        let a = net.forward(&obs(16, 1.0, 1)).unwrap().0;
        let b = net.forward(&obs(16, 0.25, 1)).unwrap().0;
        assert!(a.data.iter().zip(&b.data).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let d = Descriptor::default64();
        let a: Network<f32> = Network::init(&d, 11, 1.0).unwrap();
        let b: Network<f32> = Network::init(&d, 11, 1.0).unwrap();
        assert_eq!(a.params, b.params);
        let k = a.param("enc1.w").unwrap();
        let bound = (6.0f64 / (8.0 * 9.0)).sqrt() as f32;
        assert!(k.iter().all(|v| v.abs() <= bound));
        assert!(a.param("enc1.b").unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(a.log_std(), [-1.0; N_GAUSS]);
        let (maps, _) = a.forward(&obs(64, 1.0, 2)).unwrap();
        assert!(maps.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_resolution_is_shape_error() {
        let net: Network<f64> = Network::zeros(&Descriptor::toy16()).unwrap();
        assert!(matches!(net.forward(&obs(8, 1.0, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let net: Network<f64> = Network::init(&Descriptor::toy16(), 5, 1.0).unwrap();
        let (_, cache) = net.forward(&obs(16, 0.5, 4)).unwrap();
        let g = net.backward(&cache, &vec![0.0; 2560], 0.0).unwrap();
        assert!(g.params.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn descriptor_text_round_trip() {
        for d in [Descriptor::toy16(), Descriptor::default64(), Descriptor::paper224()] {
            assert_eq!(Descriptor::from_text(&d.to_text()).unwrap(), d);
        }
    }
}
