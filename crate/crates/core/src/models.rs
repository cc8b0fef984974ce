//! The two segmentation architectures: a U-Net over image channels and
//! a per-pixel FCNN over spectra. Both are expressed as parameter lists
//! plus a pure forward pass over a [`Tape`](crate::nn::Tape), so the
//! same code path serves f32 training and f64 gradient checking.

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::nn::{glorot_uniform, Checkpoint, Element, Parameter, Tape, Var};
use crate::types::{LabelMap, Sample, TissueClass, UsImage};

/// Negative slope shared by every leaky ReLU in both architectures.
pub const LEAKY_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    UNet,
    Fcnn,
}

impl Architecture {
    pub const ALL: [Architecture; 2] = [Architecture::UNet, Architecture::Fcnn];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::UNet => "unet",
            Architecture::Fcnn => "fcnn",
        }
    }

    pub fn parse(s: &str) -> Result<Architecture> {
        match s {
            "unet" => Ok(Architecture::UNet),
            "fcnn" => Ok(Architecture::Fcnn),
            other => Err(CoreError::config(format!(
                "unknown architecture '{other}' (expected unet or fcnn)"
            ))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which channels a model consumes. `Paus` appends the min-max
/// normalized ultrasound image after the photoacoustic wavelengths, so
/// with the default 26-wavelength axis the counts are 26 / 1 / 27.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputMode {
    Pa,
    Us,
    Paus,
}

impl InputMode {
    pub const ALL: [InputMode; 3] = [InputMode::Pa, InputMode::Us, InputMode::Paus];

    pub fn name(self) -> &'static str {
        match self {
            InputMode::Pa => "pa",
            InputMode::Us => "us",
            InputMode::Paus => "paus",
        }
    }

    pub fn parse(s: &str) -> Result<InputMode> {
        match s {
            "pa" => Ok(InputMode::Pa),
            "us" => Ok(InputMode::Us),
            "paus" => Ok(InputMode::Paus),
            other => Err(CoreError::config(format!(
                "unknown input mode '{other}' (expected pa, us, or paus)"
            ))),
        }
    }

    /// Channel count for a cube with `wavelengths` bands.
    pub fn channels(self, wavelengths: usize) -> usize {
        match self {
            InputMode::Pa => wavelengths,
            InputMode::Us => 1,
            InputMode::Paus => wavelengths + 1,
        }
    }
}

impl std::fmt::Display for InputMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One tensor in a model's parameter list: its checkpoint name, shape,
/// and Glorot fans (`None` marks a zero-initialized bias). The plan
/// order is the construction order and therefore the init draw order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPlanEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan: Option<(usize, usize)>,
}

impl ParamPlanEntry {
    fn conv(name: &str, c_out: usize, c_in: usize) -> ParamPlanEntry {
        ParamPlanEntry {
            name: format!("{name}.w"),
            shape: vec![c_out, c_in, 3, 3],
            fan: Some((c_in * 9, c_out * 9)),
        }
    }

    fn up(name: &str, c_in: usize, c_out: usize) -> ParamPlanEntry {
        ParamPlanEntry {
            name: format!("{name}.w"),
            shape: vec![c_in, c_out, 2, 2],
            fan: Some((c_in * 4, c_out * 4)),
        }
    }

    fn linear(name: &str, n_out: usize, n_in: usize) -> ParamPlanEntry {
        ParamPlanEntry {
            name: format!("{name}.w"),
            shape: vec![n_out, n_in],
            fan: Some((n_in, n_out)),
        }
    }

    fn bias(name: &str, len: usize) -> ParamPlanEntry {
        ParamPlanEntry {
            name: format!("{name}.b"),
            shape: vec![len],
            fan: None,
        }
    }

    fn count(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub dropout: f64,
}

impl UNetSpec {
    pub fn new(in_channels: usize) -> UNetSpec {
        UNetSpec {
            in_channels,
            out_channels: TissueClass::COUNT,
            base_channels: 16,
            depth: 4,
            dropout: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return Err(CoreError::config("unet channel counts must be positive"));
        }
        if self.depth == 0 || self.depth > 10 {
            return Err(CoreError::config(format!(
                "unet depth {} out of range 1..=10",
                self.depth
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::config(format!(
                "unet dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Encoder output width at level `l` (0-based): base doubled per level.
    fn level_channels(&self, l: usize) -> usize {
        self.base_channels << l
    }

    pub fn param_plan(&self) -> Vec<ParamPlanEntry> {
        let mut plan = Vec::new();
        let double_conv = |plan: &mut Vec<ParamPlanEntry>, stem: &str, c_in: usize, c: usize| {
            plan.push(ParamPlanEntry::conv(&format!("{stem}.conv1"), c, c_in));
            plan.push(ParamPlanEntry::bias(&format!("{stem}.conv1"), c));
            plan.push(ParamPlanEntry::conv(&format!("{stem}.conv2"), c, c));
            plan.push(ParamPlanEntry::bias(&format!("{stem}.conv2"), c));
        };

        let mut c_in = self.in_channels;
        for l in 0..self.depth {
            let c = self.level_channels(l);
            double_conv(&mut plan, &format!("enc{}", l + 1), c_in, c);
            c_in = c;
        }
        let c_mid = self.level_channels(self.depth);
        double_conv(&mut plan, "bottleneck", c_in, c_mid);

        let mut c_prev = c_mid;
        for l in (0..self.depth).rev() {
            let c = self.level_channels(l);
            let stem = format!("dec{}", l + 1);
            plan.push(ParamPlanEntry::up(&format!("{stem}.up"), c_prev, c));
            plan.push(ParamPlanEntry::bias(&format!("{stem}.up"), c));
            double_conv(&mut plan, &stem, 2 * c, c);
            c_prev = c;
        }

        plan.push(ParamPlanEntry::conv("final", self.out_channels, c_prev));
        plan.push(ParamPlanEntry::bias("final", self.out_channels));
        plan
    }

    pub fn param_count(&self) -> usize {
        self.param_plan().iter().map(ParamPlanEntry::count).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FcnnSpec {
    pub n_in: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub n_out: usize,
    pub dropout: f64,
}

impl FcnnSpec {
    pub fn new(n_in: usize) -> FcnnSpec {
        FcnnSpec {
            n_in,
            hidden_width: 2 * n_in,
            hidden_layers: 4,
            n_out: TissueClass::COUNT,
            dropout: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_in == 0 {
            return Err(CoreError::config("fcnn n_in must be positive"));
        }
        if self.hidden_width == 0 || self.hidden_layers == 0 || self.n_out == 0 {
            return Err(CoreError::config("fcnn layer sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::config(format!(
                "fcnn dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn param_plan(&self) -> Vec<ParamPlanEntry> {
        let n_linear = self.hidden_layers + 1;
        let mut plan = Vec::new();
        for i in 0..n_linear {
            let n_in = if i == 0 { self.n_in } else { self.hidden_width };
            let n_out = if i + 1 == n_linear {
                self.n_out
            } else {
                self.hidden_width
            };
            let stem = format!("fc{}", i + 1);
            plan.push(ParamPlanEntry::linear(&stem, n_out, n_in));
            plan.push(ParamPlanEntry::bias(&stem, n_out));
        }
        plan
    }

    pub fn param_count(&self) -> usize {
        self.param_plan().iter().map(ParamPlanEntry::count).sum()
    }
}

fn init_params<E: Element>(plan: &[ParamPlanEntry], rng: &mut ChaCha8Rng) -> Vec<Parameter<E>> {
    plan.iter()
        .map(|e| {
            let value = match e.fan {
                Some((fan_in, fan_out)) => glorot_uniform(&e.shape, fan_in, fan_out, rng),
                None => ArrayD::zeros(IxDyn(&e.shape)),
            };
            Parameter {
                name: e.name.clone(),
                value,
            }
        })
        .collect()
}

fn check_against_plan<E: Element>(plan: &[ParamPlanEntry], params: &[Parameter<E>]) -> Result<()> {
    if params.len() != plan.len() {
        return Err(CoreError::config(format!(
            "expected {} parameters, got {}",
            plan.len(),
            params.len()
        )));
    }
    for (e, p) in plan.iter().zip(params) {
        if e.name != p.name {
            return Err(CoreError::config(format!(
                "parameter order mismatch: expected '{}', got '{}'",
                e.name, p.name
            )));
        }
        if e.shape.as_slice() != p.value.shape() {
            return Err(CoreError::config(format!(
                "parameter '{}' has shape {:?}, expected {:?}",
                p.name,
                p.value.shape(),
                e.shape
            )));
        }
    }
    Ok(())
}

fn maybe_dropout<E: Element>(
    tape: &mut Tape<E>,
    h: Var,
    p: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    match rng {
        Some(r) => tape.dropout(h, p, r),
        None => Ok(h),
    }
}

/// conv -> leaky -> dropout -> conv -> leaky -> dropout. Dropout only
/// fires in training mode (`rng` present); inference is deterministic.
fn double_conv_forward<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    p_drop: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let mut h = tape.conv2d(x, w1, b1)?;
    h = tape.leaky_relu(h, LEAKY_ALPHA);
    h = maybe_dropout(tape, h, p_drop, rng)?;
    h = tape.conv2d(h, w2, b2)?;
    h = tape.leaky_relu(h, LEAKY_ALPHA);
    maybe_dropout(tape, h, p_drop, rng)
}

#[derive(Debug, Clone)]
pub struct UNet<E: Element> {
    spec: UNetSpec,
    pub params: Vec<Parameter<E>>,
}

impl<E: Element> UNet<E> {
    pub fn new(spec: UNetSpec, rng: &mut ChaCha8Rng) -> Result<UNet<E>> {
        spec.validate()?;
        let params = init_params(&spec.param_plan(), rng);
        Ok(UNet { spec, params })
    }

    pub fn from_params(spec: UNetSpec, params: Vec<Parameter<E>>) -> Result<UNet<E>> {
        spec.validate()?;
        check_against_plan(&spec.param_plan(), &params)?;
        Ok(UNet { spec, params })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    /// Pushes every parameter onto the tape, in plan order.
    pub fn load(&self, tape: &mut Tape<E>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect()
    }

    pub fn forward_train(
        &self,
        tape: &mut Tape<E>,
        params: &[Var],
        x: Var,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        self.forward_impl(tape, params, x, Some(rng))
    }

    pub fn forward_eval(&self, tape: &mut Tape<E>, params: &[Var], x: Var) -> Result<Var> {
        self.forward_impl(tape, params, x, None)
    }

    fn forward_impl(
        &self,
        tape: &mut Tape<E>,
        p: &[Var],
        x: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(CoreError::invalid(
                "unet",
                format!("input must be 4d (batch, channel, row, col), got {xs:?}"),
            ));
        }
        if xs[1] != self.spec.in_channels {
            return Err(CoreError::invalid(
                "unet",
                format!(
                    "input has {} channels, model expects {}",
                    xs[1], self.spec.in_channels
                ),
            ));
        }
        let div = 1usize << self.spec.depth;
        if xs[2] % div != 0 || xs[3] % div != 0 {
            return Err(CoreError::invalid(
                "unet",
                format!(
                    "input {}x{} not divisible by {} (depth {})",
                    xs[2], xs[3], div, self.spec.depth
                ),
            ));
        }
        if p.len() != self.params.len() {
            return Err(CoreError::invalid(
                "unet",
                format!("got {} parameter vars, expected {}", p.len(), self.params.len()),
            ));
        }

        let drop = self.spec.dropout;
        let mut i = 0;
        let mut cur = x;
        let mut skips = Vec::with_capacity(self.spec.depth);
        for _ in 0..self.spec.depth {
            cur = double_conv_forward(tape, cur, p[i], p[i + 1], p[i + 2], p[i + 3], drop, &mut rng)?;
            i += 4;
            skips.push(cur);
            cur = tape.max_pool2(cur)?;
        }
        cur = double_conv_forward(tape, cur, p[i], p[i + 1], p[i + 2], p[i + 3], drop, &mut rng)?;
        i += 4;
        for l in (0..self.spec.depth).rev() {
            cur = tape.conv_transpose2(cur, p[i], p[i + 1])?;
            cur = tape.concat_channels(cur, skips[l])?;
            cur = double_conv_forward(
                tape,
                cur,
                p[i + 2],
                p[i + 3],
                p[i + 4],
                p[i + 5],
                drop,
                &mut rng,
            )?;
            i += 6;
        }
        tape.conv2d(cur, p[i], p[i + 1])
    }
}

#[derive(Debug, Clone)]
pub struct Fcnn<E: Element> {
    spec: FcnnSpec,
    pub params: Vec<Parameter<E>>,
}

impl<E: Element> Fcnn<E> {
    pub fn new(spec: FcnnSpec, rng: &mut ChaCha8Rng) -> Result<Fcnn<E>> {
        spec.validate()?;
        let params = init_params(&spec.param_plan(), rng);
        Ok(Fcnn { spec, params })
    }

    pub fn from_params(spec: FcnnSpec, params: Vec<Parameter<E>>) -> Result<Fcnn<E>> {
        spec.validate()?;
        check_against_plan(&spec.param_plan(), &params)?;
        Ok(Fcnn { spec, params })
    }

    pub fn spec(&self) -> &FcnnSpec {
        &self.spec
    }

    pub fn load(&self, tape: &mut Tape<E>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect()
    }

    pub fn forward_train(
        &self,
        tape: &mut Tape<E>,
        params: &[Var],
        x: Var,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        self.forward_impl(tape, params, x, Some(rng))
    }

    pub fn forward_eval(&self, tape: &mut Tape<E>, params: &[Var], x: Var) -> Result<Var> {
        self.forward_impl(tape, params, x, None)
    }

    fn forward_impl(
        &self,
        tape: &mut Tape<E>,
        p: &[Var],
        x: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] != self.spec.n_in {
            return Err(CoreError::invalid(
                "fcnn",
                format!(
                    "input must be (batch, {}), got {xs:?}",
                    self.spec.n_in
                ),
            ));
        }
        if p.len() != self.params.len() {
            return Err(CoreError::invalid(
                "fcnn",
                format!("got {} parameter vars, expected {}", p.len(), self.params.len()),
            ));
        }
        let n_linear = self.spec.hidden_layers + 1;
        let mut cur = x;
        for i in 0..n_linear {
            cur = tape.linear(cur, p[2 * i], p[2 * i + 1])?;
            if i + 1 < n_linear {
                cur = tape.leaky_relu(cur, LEAKY_ALPHA);
                cur = maybe_dropout(tape, cur, self.spec.dropout, &mut rng)?;
            }
        }
        Ok(cur)
    }
}

/// Either architecture behind one interface, for checkpoint loading
/// and inference plumbing.
#[derive(Debug, Clone)]
pub enum Model<E: Element> {
    UNet(UNet<E>),
    Fcnn(Fcnn<E>),
}

impl<E: Element> Model<E> {
    pub fn architecture(&self) -> Architecture {
        match self {
            Model::UNet(_) => Architecture::UNet,
            Model::Fcnn(_) => Architecture::Fcnn,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Model::UNet(m) => m.spec.in_channels,
            Model::Fcnn(m) => m.spec.n_in,
        }
    }

    pub fn params(&self) -> &[Parameter<E>] {
        match self {
            Model::UNet(m) => &m.params,
            Model::Fcnn(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<E>] {
        match self {
            Model::UNet(m) => &mut m.params,
            Model::Fcnn(m) => &mut m.params,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    fn header_pairs(&self) -> Vec<(String, String)> {
        let mut h = vec![(
            "architecture".to_string(),
            self.architecture().name().to_string(),
        )];
        match self {
            Model::UNet(m) => {
                let s = m.spec;
                h.push(("in_channels".into(), s.in_channels.to_string()));
                h.push(("out_channels".into(), s.out_channels.to_string()));
                h.push(("base_channels".into(), s.base_channels.to_string()));
                h.push(("depth".into(), s.depth.to_string()));
                h.push(("dropout".into(), crate::config::format_f64(s.dropout)));
            }
            Model::Fcnn(m) => {
                let s = m.spec;
                h.push(("in_channels".into(), s.n_in.to_string()));
                h.push(("out_channels".into(), s.n_out.to_string()));
                h.push(("hidden_width".into(), s.hidden_width.to_string()));
                h.push(("hidden_layers".into(), s.hidden_layers.to_string()));
                h.push(("dropout".into(), crate::config::format_f64(s.dropout)));
            }
        }
        h
    }
}

impl Model<f32> {
    /// Snapshot with the architecture recorded in the header so the
    /// model can be rebuilt from the file alone. `extra_header` carries
    /// run facts (input mode, seed, epoch); keys must not collide with
    /// the architecture fields.
    pub fn to_checkpoint(&self, extra_header: &[(String, String)]) -> Checkpoint {
        let mut header = self.header_pairs();
        header.extend(extra_header.iter().cloned());
        Checkpoint {
            header,
            params: self
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(cp: &Checkpoint) -> Result<Model<f32>> {
        let need = |key: &str| -> Result<&str> {
            cp.header_value(key)
                .ok_or_else(|| CoreError::config(format!("checkpoint header missing '{key}'")))
        };
        let need_usize = |key: &str| -> Result<usize> {
            need(key)?.parse::<usize>().map_err(|_| {
                CoreError::config(format!("checkpoint header '{key}' is not a count"))
            })
        };
        let need_f64 = |key: &str| -> Result<f64> {
            need(key)?.parse::<f64>().map_err(|_| {
                CoreError::config(format!("checkpoint header '{key}' is not a number"))
            })
        };

        match Architecture::parse(need("architecture")?)? {
            Architecture::UNet => {
                let spec = UNetSpec {
                    in_channels: need_usize("in_channels")?,
                    out_channels: need_usize("out_channels")?,
                    base_channels: need_usize("base_channels")?,
                    depth: need_usize("depth")?,
                    dropout: need_f64("dropout")?,
                };
                spec.validate()?;
                let params = collect_params(cp, &spec.param_plan())?;
                Ok(Model::UNet(UNet::from_params(spec, params)?))
            }
            Architecture::Fcnn => {
                let spec = FcnnSpec {
                    n_in: need_usize("in_channels")?,
                    n_out: need_usize("out_channels")?,
                    hidden_width: need_usize("hidden_width")?,
                    hidden_layers: need_usize("hidden_layers")?,
                    dropout: need_f64("dropout")?,
                };
                spec.validate()?;
                let params = collect_params(cp, &spec.param_plan())?;
                Ok(Model::Fcnn(Fcnn::from_params(spec, params)?))
            }
        }
    }
}

fn collect_params(cp: &Checkpoint, plan: &[ParamPlanEntry]) -> Result<Vec<Parameter<f32>>> {
    if cp.params.len() != plan.len() {
        return Err(CoreError::config(format!(
            "checkpoint has {} parameters, architecture needs {}",
            cp.params.len(),
            plan.len()
        )));
    }
    let mut params = Vec::with_capacity(plan.len());
    for e in plan {
        let value = cp
            .param(&e.name)
            .ok_or_else(|| CoreError::config(format!("checkpoint missing parameter '{}'", e.name)))?;
        if value.shape() != e.shape.as_slice() {
            return Err(CoreError::config(format!(
                "checkpoint parameter '{}' has shape {:?}, expected {:?}",
                e.name,
                value.shape(),
                e.shape
            )));
        }
        params.push(Parameter {
            name: e.name.clone(),
            value: value.clone(),
        });
    }
    Ok(params)
}

/// Per-image min-max normalization of the ultrasound intensity; a
/// constant image maps to zeros.
fn normalized_us<E: Element>(us: &UsImage) -> Array2<E> {
    let v = us.values();
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &x in v.iter() {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    let range = (hi - lo) as f64;
    if range <= 0.0 {
        return Array2::zeros(v.dim());
    }
    v.mapv(|x| E::from_f64((x as f64 - lo as f64) / range))
}

/// Stacks the requested channels as (channel, row, col). PA bands are
/// used as stored; the US channel is min-max normalized per image in
/// every mode that includes it.
pub fn assemble_channels<E: Element>(sample: &Sample, mode: InputMode) -> ArrayD<E> {
    let (h, w) = (sample.height(), sample.width());
    let n = sample.pa.channels();
    match mode {
        InputMode::Pa => sample
            .pa
            .values()
            .mapv(|x| E::from_f64(x as f64))
            .into_dyn(),
        InputMode::Us => {
            let u = normalized_us::<E>(&sample.us);
            u.insert_axis(Axis(0)).into_dyn()
        }
        InputMode::Paus => {
            let mut out = Array3::<E>::zeros((n + 1, h, w));
            out.slice_mut(ndarray::s![..n, .., ..])
                .assign(&sample.pa.values().mapv(|x| E::from_f64(x as f64)));
            out.index_axis_mut(Axis(0), n)
                .assign(&normalized_us::<E>(&sample.us));
            out.into_dyn()
        }
    }
}

/// Argmax over axis 1 of a (1, K, H, W) logit block; ties go to the
/// lowest class code.
fn argmax_image<E: Element>(logits: &ArrayD<E>) -> Array2<u8> {
    let s = logits.shape();
    let (k, h, w) = (s[1], s[2], s[3]);
    let mut out = Array2::<u8>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut best = 0usize;
            let mut best_v = logits[[0, 0, r, c]];
            for ch in 1..k {
                let v = logits[[0, ch, r, c]];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            out[[r, c]] = best as u8;
        }
    }
    out
}

/// Argmax per row of an (N, K) logit block, row-major over an H x W grid.
fn argmax_rows<E: Element>(logits: &ArrayD<E>, h: usize, w: usize) -> Array2<u8> {
    let k = logits.shape()[1];
    let mut out = Array2::<u8>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let row = r * w + c;
            let mut best = 0usize;
            let mut best_v = logits[[row, 0]];
            for ch in 1..k {
                let v = logits[[row, ch]];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            out[[r, c]] = best as u8;
        }
    }
    out
}

/// Runs the model over one sample and argmaxes the logits into a label
/// map. Dropout is disabled, so repeated calls agree exactly.
pub fn predict_labels<E: Element>(
    model: &Model<E>,
    sample: &Sample,
    mode: InputMode,
) -> Result<LabelMap> {
    if model.architecture() == Architecture::Fcnn && mode == InputMode::Us {
        return Err(CoreError::config(
            "fcnn cannot take us input: a single intensity per pixel is not a spectrum",
        ));
    }
    let x = assemble_channels::<E>(sample, mode);
    let c = x.shape()[0];
    if c != model.in_channels() {
        return Err(CoreError::config(format!(
            "input mode {} yields {} channels, model expects {}",
            mode,
            c,
            model.in_channels()
        )));
    }
    let (h, w) = (sample.height(), sample.width());
    let codes = match model {
        Model::UNet(net) => {
            let mut tape: Tape<E> = Tape::new();
            let pv = net.load(&mut tape, false);
            let xv = tape.leaf(x.insert_axis(Axis(0)), false);
            let logits = net.forward_eval(&mut tape, &pv, xv)?;
            argmax_image(tape.value(logits))
        }
        Model::Fcnn(net) => {
            let pixels =
                Array2::from_shape_fn((h * w, c), |(i, j)| x[[j, i / w, i % w]]).into_dyn();
            let mut tape: Tape<E> = Tape::new();
            let pv = net.load(&mut tape, false);
            let xv = tape.leaf(pixels, false);
            let logits = net.forward_eval(&mut tape, &pv, xv)?;
            argmax_rows(tape.value(logits), h, w)
        }
    };
    LabelMap::new(codes)
}
