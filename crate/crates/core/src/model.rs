//! Toy R2Net classifiers: a lifting stem, four downsampling stages, the
//! transfer block, global average pooling and a linear head.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::group::Representation;
use crate::layers::{Builder, Gcba, Layer, LayerKind, LayerSpec, Linear, LiftingBlock, Mode, R2NetBlock, TransferBlock};
use crate::params::{Forward, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the classifier head weights; keeps initial logits
/// near zero so the initial loss sits at ln(num_classes).
pub const HEAD_INIT_STD: f64 = 0.01;

/// Smallest `2^n + 1` not below `n`. Stride-2 stages on such sizes sample a
/// lattice that is symmetric under quarter turns at every stage.
pub fn canvas_for(n: usize) -> usize {
    let mut c = 3;
    while c < n {
        c = 2 * c - 1;
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub widths: Vec<usize>,
    pub mode: Mode,
    pub sigma: f64,
    pub num_classes: usize,
    pub in_channels: usize,
    pub input_size: usize,
    /// Inputs are bilinearly resized (corners aligned) to `canvas × canvas`.
    pub canvas: usize,
    pub kernel: usize,
    pub n_bottlenecks: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            name: "r2net-toy".into(),
            widths: vec![8, 16, 32, 32],
            mode: Mode::Relaxed,
            sigma: 0.1,
            num_classes: 10,
            in_channels: 1,
            input_size: 28,
            canvas: canvas_for(28),
            kernel: 3,
            n_bottlenecks: 1,
        }
    }
}

impl ModelSpec {
    pub fn toy(widths: &[usize], mode: Mode, sigma: f64, num_classes: usize) -> Self {
        Self {
            widths: widths.to_vec(),
            mode,
            sigma,
            num_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.widths.len() != 4 {
            return bad(format!("expected 4 stage widths, got {}", self.widths.len()));
        }
        if self.widths.iter().any(|&w| w == 0 || w % 2 != 0) {
            return bad(format!("stage widths must be positive and even, got {:?}", self.widths));
        }
        if self.num_classes == 0 || self.in_channels == 0 || self.input_size == 0 {
            return bad("num_classes, in_channels and input_size must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel));
        }
        if self.canvas < self.input_size || canvas_for(self.canvas) != self.canvas {
            return bad(format!(
                "canvas {} must be of the form 2^n + 1 and at least the input size {}",
                self.canvas, self.input_size
            ));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma {} must be finite and >= 0", self.sigma));
        }
        Ok(())
    }

    /// Channel widths actually instantiated: plain models double them so
    /// their parameter budget matches the group model.
    pub fn channel_widths(&self) -> Vec<usize> {
        let f = if self.mode.is_group() { 1 } else { 2 };
        self.widths.iter().map(|w| w * f).collect()
    }

    /// Output widths of the four stages: `widths[0]` is the stem, the next
    /// three stages take `widths[1..4]` and the last stage keeps its input width.
    pub fn stage_widths(&self) -> Vec<usize> {
        let w = self.channel_widths();
        vec![w[1], w[2], w[3], w[3]]
    }

    /// Transfer-block output width, the same in every mode.
    pub fn transfer_width(&self) -> usize {
        self.widths[3]
    }

    /// Named layer list in forward order.
    pub fn layers(&self) -> Vec<(String, LayerSpec)> {
        let w = self.channel_widths();
        let (k, mode) = (self.kernel, self.mode);
        let spec = |kind, ci, co, k, stride| LayerSpec {
            kind,
            ci,
            co,
            k,
            stride,
            mode,
        };
        let mut out = vec![("stem".to_string(), spec(LayerKind::Lifting, self.in_channels, w[0], k, 1))];
        let mut prev = w[0];
        for (i, c) in self.stage_widths().into_iter().enumerate() {
            out.push((format!("stage{}.down", i + 1), spec(LayerKind::Gcba, prev, c, k, 2)));
            out.push((format!("stage{}.block", i + 1), spec(LayerKind::R2NetBlock, c, c, k, 1)));
            prev = c;
        }
        let t = self.transfer_width();
        out.push(("transfer".into(), spec(LayerKind::Transfer, prev, t, 1, 1)));
        out.push(("head".into(), spec(LayerKind::Linear, t, self.num_classes, 1, 1)));
        out
    }

    pub fn to_blob(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let mut s = String::new();
        for (k, v) in [
            ("name", self.name.clone()),
            ("widths", widths.join(",")),
            ("mode", self.mode.to_string()),
            ("sigma", format!("{:?}", self.sigma)),
            ("num_classes", self.num_classes.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("input_size", self.input_size.to_string()),
            ("canvas", self.canvas.to_string()),
            ("kernel", self.kernel.to_string()),
            ("n_bottlenecks", self.n_bottlenecks.to_string()),
        ] {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            map.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Spec(format!("missing key `{k}`")))
        };
        fn num<F: std::str::FromStr>(k: &str, v: &str) -> Result<F> {
            v.parse()
                .map_err(|_| Error::Spec(format!("bad value `{v}` for `{k}`")))
        }
        let widths = get("widths")?
            .split(',')
            .map(|w| num::<usize>("widths", w.trim()))
            .collect::<Result<Vec<_>>>()?;
        let spec = Self {
            name: get("name")?.to_string(),
            widths,
            mode: get("mode")?.parse().map_err(Error::Spec)?,
            sigma: num("sigma", get("sigma")?)?,
            num_classes: num("num_classes", get("num_classes")?)?,
            in_channels: num("in_channels", get("in_channels")?)?,
            input_size: num("input_size", get("input_size")?)?,
            canvas: num("canvas", get("canvas")?)?,
            kernel: num("kernel", get("kernel")?)?,
            n_bottlenecks: num("n_bottlenecks", get("n_bottlenecks")?)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_blob(blob: &str) -> Result<Self> {
        Self::from_map(&parse_kv(blob)?)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} widths={:?} mode={} sigma={} classes={} input={}x{}x{} canvas={}",
            self.name,
            self.widths,
            self.mode,
            self.sigma,
            self.num_classes,
            self.in_channels,
            self.input_size,
            self.input_size,
            self.canvas
        )
    }
}

/// Parses `key=value` lines; blank lines are skipped.
pub fn parse_kv(blob: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in blob.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Spec(format!("line without `=`: {line:?}")))?;
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Spec(format!("duplicate key `{k}`")));
        }
    }
    Ok(map)
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub down: Gcba,
    pub block: R2NetBlock,
}

/// Layer structure of a toy classifier; parameters live in a separate store.
#[derive(Debug, Clone)]
pub struct R2Net {
    pub spec: ModelSpec,
    pub stem: LiftingBlock,
    pub stages: Vec<Stage>,
    pub transfer: TransferBlock,
    pub head: Linear,
}

/// One recorded intermediate output and the C4 action it carries.
#[derive(Debug, Clone)]
pub struct Tap {
    pub name: String,
    pub var: Var,
    pub rep: Representation,
}

impl R2Net {
    pub fn build<T: Scalar>(spec: &ModelSpec, b: &mut Builder<'_, T>) -> Result<Self> {
        spec.validate()?;
        let w = spec.channel_widths();
        let k = spec.kernel;
        let stem = LiftingBlock::new(&mut b.scope("stem"), spec.in_channels, w[0], k, 1)?;
        let mut stages = Vec::with_capacity(4);
        let mut prev = w[0];
        for (i, c) in spec.stage_widths().into_iter().enumerate() {
            let mut sb = b.scope(&format!("stage{}", i + 1));
            let down = Gcba::new(&mut sb.scope("down"), prev, c, k, 2)?;
            let block = R2NetBlock::new(&mut sb.scope("block"), c, c, k, spec.n_bottlenecks)?;
            stages.push(Stage { down, block });
            prev = c;
        }
        let t = spec.transfer_width();
        let transfer = TransferBlock::new(&mut b.scope("transfer"), prev, t)?;
        let head = Linear::new(&mut b.scope("head"), t, spec.num_classes, HEAD_INIT_STD)?;
        Ok(Self {
            spec: spec.clone(),
            stem,
            stages,
            transfer,
            head,
        })
    }

    /// Corner-aligned bilinear resize of `(b, c, n, n)` to the canvas.
    fn resize<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let s = fw.graph.shape(x).to_vec();
        let n = self.spec.input_size;
        if s.len() != 4 || s[1] != self.spec.in_channels || s[2] != n || s[3] != n {
            return Err(shape_err(
                "r2net",
                format!(
                    "expected (b, {}, {n}, {n}) input, got {s:?}",
                    self.spec.in_channels
                ),
            ));
        }
        let c = self.spec.canvas;
        if c == n {
            return Ok(x);
        }
        let mut theta = Vec::with_capacity(6 * s[0]);
        for _ in 0..s[0] {
            theta.extend_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        }
        let theta = fw.graph.constant(Tensor::from_f64(&[s[0], 2, 3], &theta)?);
        let grid = fw.graph.affine_grid(theta, c, c)?;
        fw.graph.grid_sample(x, grid)
    }

    fn run<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var, mut taps: Option<&mut Vec<Tap>>) -> Result<Var> {
        let feat = self.spec.mode.feature_rep();
        let mut tap = |name: &str, var: Var, rep: Representation| {
            if let Some(t) = taps.as_deref_mut() {
                t.push(Tap {
                    name: name.to_string(),
                    var,
                    rep,
                });
            }
        };
        let x = self.resize(fw, x)?;
        tap("resize", x, Representation::Spatial);
        let mut h = self.stem.forward(fw, x)?;
        tap("stem", h, feat);
        for (i, st) in self.stages.iter().enumerate() {
            h = st.down.forward(fw, h)?;
            tap(&format!("stage{}.down", i + 1), h, feat);
            h = st.block.forward(fw, h)?;
            tap(&format!("stage{}.block", i + 1), h, feat);
        }
        let t = self.transfer.forward(fw, h)?;
        tap("transfer", t, Representation::Spatial);
        let pooled = fw.graph.global_avg_pool(t)?;
        tap("pool", pooled, Representation::Trivial);
        let logits = self.head.forward(fw, pooled)?;
        tap("head", logits, Representation::Trivial);
        Ok(logits)
    }

    /// Logits `(b, num_classes)`.
    pub fn forward<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        self.run(fw, x, None)
    }

    /// Logits plus every intermediate output in forward order.
    pub fn forward_traced<T: Scalar>(&self, fw: &mut Forward<'_, T>, x: Var) -> Result<(Var, Vec<Tap>)> {
        let mut taps = Vec::new();
        let y = self.run(fw, x, Some(&mut taps))?;
        Ok((y, taps))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRow {
    pub name: String,
    pub spec: LayerSpec,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub rows: Vec<ParamRow>,
    pub total: usize,
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            writeln!(
                f,
                "layer name={} kind={} ci={} co={} k={} stride={} params={}",
                r.name, r.spec.kind, r.spec.ci, r.spec.co, r.spec.k, r.spec.stride, r.params
            )?;
        }
        write!(f, "total params={}", self.total)
    }
}

/// A network together with its parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    pub net: R2Net,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = {
            let mut b = Builder::new(&mut params, &mut rng, spec.mode, spec.sigma);
            R2Net::build(spec, &mut b)?
        };
        Ok(Self { net, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.net.spec
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    /// Inference-mode logits.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut fw = Forward::eval(&self.params);
        let xv = fw.graph.constant(x.clone());
        let y = self.net.forward(&mut fw, xv)?;
        Ok(fw.graph.value(y).clone())
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    pub fn param_report(&self) -> ParamReport {
        let rows = self
            .spec()
            .layers()
            .into_iter()
            .map(|(name, spec)| {
                let prefix = format!("{name}.");
                let params = self
                    .params
                    .entries()
                    .iter()
                    .filter(|e| e.kind == ParamKind::Trainable && e.name.starts_with(&prefix))
                    .map(|e| e.value.numel())
                    .sum();
                ParamRow { name, spec, params }
            })
            .collect();
        ParamReport {
            rows,
            total: self.param_count(),
        }
    }

    /// Every Δ tensor, by parameter name.
    pub fn deltas(&self) -> Vec<(&str, &Tensor<T>)> {
        self.params
            .entries()
            .iter()
            .filter(|e| e.name.ends_with(".delta") || e.name == "delta")
            .map(|e| (e.name.as_str(), &e.value))
            .collect()
    }

    /// Multiplies every Δ by `t` (used for EE sweeps).
    pub fn scale_deltas(&mut self, t: f64) {
        let t = T::from_f64_lossy(t);
        let ids: Vec<_> = self
            .params
            .ids()
            .filter(|&id| {
                let n = &self.params.entry(id).name;
                n.ends_with(".delta") || n == "delta"
            })
            .collect();
        for id in ids {
            let v = self.params.get(id).scale(t);
            *self.params.get_mut(id) = v;
        }
    }
}

/// Builds the default toy classifier.
pub fn build_r2net_toy(widths: &[usize], mode: Mode, sigma: f64, num_classes: usize, seed: u64) -> Result<Model> {
    Model::build(&ModelSpec::toy(widths, mode, sigma, num_classes), seed)
}

/// Parameter table for a spec without keeping the model.
pub fn param_count(spec: &ModelSpec) -> Result<ParamReport> {
    Ok(Model::<f32>::build(spec, 0)?.param_report())
}

/// `4·ci·co + k²·co + 16`: separable relaxed group conv, excluding normalization.
pub fn r2gconv_params(ci: usize, co: usize, k: usize) -> usize {
    4 * ci * co + k * k * co + 16
}

/// `4·ci·co·k²`: a full regular-representation group conv.
pub fn gconv_params(ci: usize, co: usize, k: usize) -> usize {
    4 * ci * co * k * k
}

/// Asymptotic ratio `1/k² + 1/(4·ci)` of the two counts above.
pub fn r2gconv_ratio(ci: usize, k: usize) -> f64 {
    1.0 / (k * k) as f64 + 1.0 / (4 * ci) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{act_on_input, C4};

    #[test]
    fn canvas_sizes() {
        assert_eq!(canvas_for(28), 33);
        assert_eq!(canvas_for(33), 33);
        assert_eq!(canvas_for(9), 9);
        assert_eq!(canvas_for(10), 17);
        assert_eq!(canvas_for(1), 3);
    }

    #[test]
    fn blob_round_trip() {
        let spec = ModelSpec::toy(&[4, 8, 8, 8], Mode::Strict, 0.25, 4);
        assert_eq!(ModelSpec::from_blob(&spec.to_blob()).unwrap(), spec);
        assert!(ModelSpec::from_blob("name=x\n").is_err());
        let bad = spec.to_blob().replace("widths=4,8,8,8", "widths=4,8,8");
        assert!(ModelSpec::from_blob(&bad).is_err());
    }

    #[test]
    fn toy_forward_shape_and_initial_logits() {
        let m = build_r2net_toy(&[8, 16, 32, 32], Mode::Relaxed, 0.1, 10, 3).unwrap();
        let x = Tensor::from_fn(&[2, 1, 28, 28], |i| ((i * 37) % 255) as f32 / 255.0);
        let y = m.logits(&x).unwrap();
        assert_eq!(y.shape(), &[2, 10]);
        assert!(y.max_abs() < 1.0);
    }

    #[test]
    fn plain_budget_matches_group_budget() {
        let g = param_count(&ModelSpec::toy(&[8, 16, 32, 32], Mode::Relaxed, 0.1, 10)).unwrap();
        let p = param_count(&ModelSpec::toy(&[8, 16, 32, 32], Mode::Plain, 0.1, 10)).unwrap();
        let rel = (p.total as f64 - g.total as f64).abs() / g.total as f64;
        assert!(rel <= 0.10, "group {} plain {}", g.total, p.total);
    }

    #[test]
    fn sbdet_n_rows() {
        let spec = ModelSpec {
            widths: vec![16, 32, 64, 128],
            in_channels: 3,
            ..ModelSpec::default()
        };
        let r = param_count(&spec).unwrap();
        assert_eq!(r.rows[0].params, 480);
        assert_eq!(r.rows[1].params, 2416);
        assert_eq!(r.rows.iter().map(|r| r.params).sum::<usize>(), r.total);
    }

    #[test]
    fn ratio_formula() {
        for (ci, k) in [(16, 3), (8, 5), (64, 3)] {
            let co = 1 << 20;
            let exact = (r2gconv_params(ci, co, k) - 16) as f64 / gconv_params(ci, co, k) as f64;
            assert!((exact - r2gconv_ratio(ci, k)).abs() < 1e-15);
        }
    }

    #[test]
    fn strict_model_is_invariant() {
        let m = build_r2net_toy(&[4, 8, 8, 8], Mode::Strict, 0.0, 5, 1).unwrap();
        let x = Tensor::from_fn(&[2, 1, 28, 28], |i| (((i * 7919) % 1000) as f32 / 500.0) - 1.0);
        let y = m.logits(&x).unwrap();
        for g in C4::all() {
            let gy = m.logits(&act_on_input(g, &x).unwrap()).unwrap();
            assert!(gy.max_abs_diff(&y).unwrap() <= 1e-4);
        }
    }

    #[test]
    fn plain_model_is_not_invariant() {
        let m = build_r2net_toy(&[4, 8, 8, 8], Mode::Plain, 0.0, 5, 1).unwrap();
        let x = Tensor::from_fn(&[2, 1, 28, 28], |i| (((i * 7919) % 1000) as f32 / 500.0) - 1.0);
        let y = m.logits(&x).unwrap();
        let gy = m.logits(&act_on_input(C4::new(1).unwrap(), &x).unwrap()).unwrap();
        let dev = gy.max_abs_diff(&y).unwrap();
        assert!(dev > 0.01, "deviation {dev}");
    }
}
