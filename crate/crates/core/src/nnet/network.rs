use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::layers::{self, pool_extent};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Baseline,
    Symmetry,
}

impl ModelKind {
    /// Number of parallel feature-extraction streams.
    pub fn streams(self) -> usize {
        match self {
            ModelKind::Baseline => 1,
            ModelKind::Symmetry => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Baseline => "baseline",
            ModelKind::Symmetry => "symmetry",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ModelKind::Baseline),
            "symmetry" => Ok(ModelKind::Symmetry),
            other => Err(Error::config(
                "model",
                format!("expected `baseline` or `symmetry`, got `{other}`"),
            )),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Topology of either network. Each stage is conv → ReLU → max-pool, except
/// the last, which ends in global average pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: ModelKind,
    pub input_size_px: usize,
    pub conv_filters: Vec<usize>,
    pub conv_kernel: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub dense_units: Vec<usize>,
    pub dropout_rate: f64,
}

/// Smallest input for which seven 3×3 conv / 3×3-stride-2 pool stages close.
pub const FULL_SCALE_INPUT_PX: usize = 381;

impl NetworkSpec {
    /// Full-scale seven-stage network.
    pub fn full_scale(kind: ModelKind) -> Self {
        NetworkSpec {
            kind,
            input_size_px: FULL_SCALE_INPUT_PX,
            conv_filters: vec![16, 32, 32, 64, 64, 128, 128],
            conv_kernel: 3,
            pool_window: 3,
            pool_stride: 2,
            dense_units: vec![300, 300, 2],
            dropout_rate: 0.5,
        }
    }

    pub fn with_kind(&self, kind: ModelKind) -> Self {
        NetworkSpec { kind, ..self.clone() }
    }

    pub fn stages(&self) -> usize {
        self.conv_filters.len()
    }

    /// Width of one stream's pooled feature vector.
    pub fn stream_features(&self) -> usize {
        *self.conv_filters.last().unwrap_or(&0)
    }

    /// Width of the classifier-head input.
    pub fn head_input(&self) -> usize {
        self.stream_features() * self.kind.streams()
    }

    /// Spatial extent entering each conv stage.
    pub fn stage_input_sizes(&self) -> Result<Vec<usize>> {
        let mut sizes = Vec::with_capacity(self.stages());
        let mut n = self.input_size_px;
        for (i, _) in self.conv_filters.iter().enumerate() {
            if n < self.conv_kernel {
                return Err(Error::config(
                    "input_size_px",
                    format!(
                        "{} px input leaves a {n}x{n} map at conv {}, smaller than the {k}x{k} kernel",
                        self.input_size_px,
                        i + 1,
                        k = self.conv_kernel
                    ),
                ));
            }
            sizes.push(n);
            let conv_out = n - self.conv_kernel + 1;
            if i + 1 < self.stages() {
                n = pool_extent(conv_out, self.pool_window, self.pool_stride).ok_or_else(|| {
                    Error::config(
                        "input_size_px",
                        format!(
                            "{} px input leaves a {conv_out}x{conv_out} map at pool {}, smaller than the pool window",
                            self.input_size_px,
                            i + 1
                        ),
                    )
                })?;
            }
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_filters.is_empty() || self.conv_filters.contains(&0) {
            return Err(Error::config("conv_filters", "need at least one stage, all positive"));
        }
        if self.conv_kernel == 0 || self.conv_kernel % 2 == 0 {
            return Err(Error::config("conv_kernel", "must be odd"));
        }
        if self.pool_window == 0 {
            return Err(Error::config("pool_window", "must be positive"));
        }
        if self.pool_stride == 0 {
            return Err(Error::config("pool_stride", "must be positive"));
        }
        if self.dense_units.last() != Some(&2) || self.dense_units.contains(&0) {
            return Err(Error::config("dense_units", "last layer must have 2 units, all positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        self.stage_input_sizes().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Layer<T> {
    fn zeros_like(&self) -> Self {
        Layer {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }
}

/// Weights of one network. Symmetry models hold two independent stream
/// copies; the head is shared by construction (there is only one).
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub streams: Vec<Vec<Layer<T>>>,
    pub head: Vec<Layer<T>>,
}

impl<T: Scalar> Parameters<T> {
    pub fn zeros_like(&self) -> Self {
        Parameters {
            streams: self
                .streams
                .iter()
                .map(|s| s.iter().map(Layer::zeros_like).collect())
                .collect(),
            head: self.head.iter().map(Layer::zeros_like).collect(),
        }
    }

    /// All tensors with stable names, in storage order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (s, stream) in self.streams.iter().enumerate() {
            for (i, l) in stream.iter().enumerate() {
                out.push((format!("stream{s}.conv{i}.weight"), &l.weight));
                out.push((format!("stream{s}.conv{i}.bias"), &l.bias));
            }
        }
        for (j, l) in self.head.iter().enumerate() {
            out.push((format!("head.dense{j}.weight"), &l.weight));
            out.push((format!("head.dense{j}.bias"), &l.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for stream in self.streams.iter_mut() {
            for l in stream.iter_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        for l in self.head.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        let cast = |l: &Layer<T>| Layer {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        Parameters {
            streams: self.streams.iter().map(|s| s.iter().map(cast).collect()).collect(),
            head: self.head.iter().map(cast).collect(),
        }
    }

    /// Checks tensor shapes against a spec.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let expect = shapes(spec);
        let got: Vec<Vec<usize>> = self.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
        if got != expect {
            return Err(Error::Shape(format!(
                "parameters do not match the {} network spec",
                spec.kind
            )));
        }
        Ok(())
    }
}

/// Weight and bias shapes in [`Parameters::named`] order.
fn shapes(spec: &NetworkSpec) -> Vec<Vec<usize>> {
    let k = spec.conv_kernel;
    let mut out = Vec::new();
    for _ in 0..spec.kind.streams() {
        let mut cin = 1;
        for &f in &spec.conv_filters {
            out.push(vec![f, cin, k, k]);
            out.push(vec![f]);
            cin = f;
        }
    }
    let mut fin = spec.head_input();
    for &u in &spec.dense_units {
        out.push(vec![u, fin]);
        out.push(vec![u]);
        fin = u;
    }
    out
}

/// Glorot-uniform half-width for a layer.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn glorot_layer<T: Scalar, R: Rng + ?Sized>(
    wshape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Layer<T> {
    let a = glorot_limit(fan_in, fan_out);
    let n: usize = wshape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-a..=a))).collect();
    Layer {
        weight: Tensor::new(wshape, data).expect("shape product"),
        bias: Tensor::zeros(&[wshape[0]]),
    }
}

/// Glorot-initialized head only (used when transferring extractor weights).
pub fn glorot_head<T: Scalar, R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Vec<Layer<T>> {
    let mut fin = spec.head_input();
    spec.dense_units
        .iter()
        .map(|&u| {
            let l = glorot_layer(&[u, fin], fin, u, rng);
            fin = u;
            l
        })
        .collect()
}

/// Glorot-uniform weights, zero biases. Conv fans count the receptive field.
pub fn glorot_init<T: Scalar, R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Parameters<T>> {
    spec.validate()?;
    let k = spec.conv_kernel;
    let streams = (0..spec.kind.streams())
        .map(|_| {
            let mut cin = 1;
            spec.conv_filters
                .iter()
                .map(|&f| {
                    let l = glorot_layer(&[f, cin, k, k], cin * k * k, f * k * k, rng);
                    cin = f;
                    l
                })
                .collect()
        })
        .collect();
    let head = glorot_head(spec, rng);
    Ok(Parameters { streams, head })
}

/// Whether dropout is active. Training draws masks from the given rng.
pub enum Mode<'a> {
    Inference,
    Train(&'a mut dyn RngCore),
}

struct Stage<T> {
    input: Tensor<T>,
    activation: Tensor<T>,
    argmax: Vec<u32>,
}

struct HeadLayerCache<T> {
    input: Tensor<T>,
    activation: Option<Tensor<T>>,
    mask: Option<Vec<T>>,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardPass<T> {
    stages: Vec<Vec<Stage<T>>>,
    head: Vec<HeadLayerCache<T>>,
    pub features: Tensor<T>,
    pub probs: Tensor<T>,
}

fn finite<T: Scalar>(t: &Tensor<T>, layer: impl FnOnce() -> String) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { layer: layer() })
    }
}

fn stream_forward<T: Scalar>(
    spec: &NetworkSpec,
    layers: &[Layer<T>],
    input: &Tensor<T>,
    s: usize,
    keep_cache: bool,
) -> Result<(Tensor<T>, Vec<Stage<T>>)> {
    let mut x = input.clone();
    let mut cache = Vec::new();
    let last = layers.len() - 1;
    for (i, l) in layers.iter().enumerate() {
        let mut a = layers::conv2d_forward(&x, &l.weight, &l.bias)?;
        layers::relu_inplace(&mut a);
        finite(&a, || format!("stream{s}.conv{i}"))?;
        let (next, argmax) = if i < last {
            layers::maxpool_forward(&a, spec.pool_window, spec.pool_stride)?
        } else {
            (layers::gap_forward(&a)?, Vec::new())
        };
        if keep_cache {
            cache.push(Stage {
                input: std::mem::replace(&mut x, next),
                activation: a,
                argmax,
            });
        } else {
            x = next;
        }
    }
    Ok((x, cache))
}

fn check_inputs<T: Scalar>(spec: &NetworkSpec, params: &Parameters<T>, inputs: &[&Tensor<T>]) -> Result<usize> {
    let streams = spec.kind.streams();
    if inputs.len() != streams || params.streams.len() != streams {
        return Err(Error::Shape(format!(
            "{} network takes {streams} input stream(s), got {} inputs and {} parameter streams",
            spec.kind,
            inputs.len(),
            params.streams.len()
        )));
    }
    let n = inputs[0].shape().first().copied().unwrap_or(0);
    let size = spec.input_size_px;
    for t in inputs {
        if t.shape() != [n, 1, size, size] {
            return Err(Error::Shape(format!(
                "expected input [{n}, 1, {size}, {size}], got {:?}",
                t.shape()
            )));
        }
    }
    Ok(n)
}

/// Runs the full network. `inputs` holds one `[n, 1, S, S]` tensor per stream
/// (primary first for the symmetry model).
pub fn forward<T: Scalar>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    inputs: &[&Tensor<T>],
    mode: Mode<'_>,
) -> Result<ForwardPass<T>> {
    let n = check_inputs(spec, params, inputs)?;
    let train = matches!(mode, Mode::Train(_));
    let mut stages = Vec::new();
    let mut feats = Vec::new();
    for (s, (layers, input)) in params.streams.iter().zip(inputs).enumerate() {
        let (f, cache) = stream_forward(spec, layers, input, s, train)?;
        feats.push(f);
        stages.push(cache);
    }
    let fw = spec.stream_features();
    let mut features = Vec::with_capacity(n * fw * feats.len());
    for row in 0..n {
        for f in &feats {
            features.extend_from_slice(&f.data()[row * fw..(row + 1) * fw]);
        }
    }
    let features = Tensor::new(&[n, fw * feats.len()], features)?;

    let mut rng = match mode {
        Mode::Train(r) => Some(r),
        Mode::Inference => None,
    };
    let mut head = Vec::new();
    let mut x = features.clone();
    let last = params.head.len() - 1;
    for (j, l) in params.head.iter().enumerate() {
        let mut z = layers::dense_forward(&x, &l.weight, &l.bias)?;
        let mut activation = None;
        let mut mask = None;
        if j < last {
            layers::relu_inplace(&mut z);
            if j == 0 {
                if let Some(r) = rng.as_deref_mut() {
                    activation = Some(z.clone());
                    if spec.dropout_rate > 0.0 {
                        mask = Some(layers::dropout_forward(&mut z, spec.dropout_rate, r));
                    }
                }
            }
        }
        finite(&z, || format!("head.dense{j}"))?;
        if train {
            head.push(HeadLayerCache {
                input: std::mem::replace(&mut x, z),
                activation,
                mask,
            });
        } else {
            x = z;
        }
    }
    let probs = layers::softmax(&x)?;
    finite(&probs, || "softmax".to_string())?;
    Ok(ForwardPass {
        stages,
        head,
        features,
        probs,
    })
}

/// Class probabilities `[n, 2]` without dropout.
pub fn predict<T: Scalar>(spec: &NetworkSpec, params: &Parameters<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    Ok(forward(spec, params, inputs, Mode::Inference)?.probs)
}

/// Single-input network on a `[n, 1, S, S]` batch.
pub fn baseline_forward<T: Scalar>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    patches: &Tensor<T>,
    mode: Mode<'_>,
) -> Result<Tensor<T>> {
    if spec.kind != ModelKind::Baseline {
        return Err(Error::config("kind", "baseline_forward needs a baseline spec"));
    }
    Ok(forward(spec, params, &[patches], mode)?.probs)
}

/// Two-stream network on primary and contra-lateral batches.
pub fn symmetry_forward<T: Scalar>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    primary: &Tensor<T>,
    contralateral: &Tensor<T>,
    mode: Mode<'_>,
) -> Result<Tensor<T>> {
    if spec.kind != ModelKind::Symmetry {
        return Err(Error::config("kind", "symmetry_forward needs a symmetry spec"));
    }
    Ok(forward(spec, params, &[primary, contralateral], mode)?.probs)
}

/// Mean cross-entropy of a training-mode forward pass and the gradient of
/// every parameter.
pub fn backward<T: Scalar>(
    spec: &NetworkSpec,
    params: &Parameters<T>,
    pass: &ForwardPass<T>,
    labels: &[usize],
) -> Result<(T, Parameters<T>)> {
    if pass.head.len() != params.head.len() {
        return Err(Error::Shape("backward needs a training-mode forward pass".into()));
    }
    let (loss, grad_p) = layers::cross_entropy(&pass.probs, labels)?;
    let mut g = layers::softmax_backward(&pass.probs, &grad_p);
    let mut grads = params.zeros_like();

    for j in (0..params.head.len()).rev() {
        let cache = &pass.head[j];
        let d = layers::dense_backward(&cache.input, &params.head[j].weight, &g)?;
        grads.head[j] = Layer {
            weight: d.weight,
            bias: d.bias,
        };
        g = d.input;
        if j > 0 {
            let prev = &pass.head[j - 1];
            if let Some(mask) = &prev.mask {
                layers::dropout_backward(&mut g, mask);
            }
            let act = prev.activation.as_ref().unwrap_or(&cache.input);
            layers::relu_backward(act, &mut g);
        }
    }

    let n = labels.len();
    let fw = spec.stream_features();
    let streams = params.streams.len();
    for s in 0..streams {
        let mut gf = Vec::with_capacity(n * fw);
        for row in 0..n {
            let off = row * fw * streams + s * fw;
            gf.extend_from_slice(&g.data()[off..off + fw]);
        }
        let mut gs = Tensor::new(&[n, fw], gf)?;
        let stages = &pass.stages[s];
        for i in (0..stages.len()).rev() {
            let st = &stages[i];
            let mut ga = if i + 1 == stages.len() {
                layers::gap_backward(st.activation.shape(), &gs)?
            } else {
                layers::maxpool_backward(st.activation.shape(), &st.argmax, &gs)?
            };
            layers::relu_backward(&st.activation, &mut ga);
            let c = layers::conv2d_backward(&st.input, &params.streams[s][i].weight, &ga, i > 0)?;
            grads.streams[s][i] = Layer {
                weight: c.weight,
                bias: c.bias,
            };
            if let Some(gi) = c.input {
                gs = gi;
            }
        }
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite {
            layer: "backward".into(),
        });
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{rngs::StdRng, SeedableRng};

    fn small(kind: ModelKind) -> NetworkSpec {
        NetworkSpec {
            kind,
            input_size_px: 24,
            conv_filters: vec![3, 4],
            conv_kernel: 3,
            pool_window: 3,
            pool_stride: 2,
            dense_units: vec![5, 4, 2],
            dropout_rate: 0.5,
        }
    }

    fn random_input(n: usize, size: usize, rng: &mut StdRng) -> Tensor<f64> {
        Tensor::new(
            &[n, 1, size, size],
            (0..n * size * size).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Random non-zero biases keep ReLUs away from exact zeros.
    fn jitter_biases(p: &mut Parameters<f64>, rng: &mut StdRng) {
        for s in p.streams.iter_mut() {
            for l in s.iter_mut() {
                l.bias.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(0.05..0.2));
            }
        }
        for l in p.head.iter_mut() {
            l.bias.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(0.05..0.2));
        }
    }

    #[test]
    fn full_scale_arithmetic_closes_at_381_only() {
        let spec = NetworkSpec::full_scale(ModelKind::Baseline);
        spec.validate().unwrap();
        assert_eq!(spec.stage_input_sizes().unwrap(), vec![381, 189, 93, 45, 21, 9, 3]);
        let mut short = spec.clone();
        short.input_size_px = 380;
        assert!(short.validate().is_err());
        short.input_size_px = 300;
        let err = short.validate().unwrap_err().to_string();
        assert!(err.contains("input_size_px"), "{err}");
    }

    #[test]
    fn spec_validation_names_fields() {
        let base = small(ModelKind::Baseline);
        let cases: Vec<(&str, NetworkSpec)> = vec![
            ("conv_kernel", NetworkSpec { conv_kernel: 4, ..base.clone() }),
            ("dense_units", NetworkSpec { dense_units: vec![5, 3], ..base.clone() }),
            ("dropout_rate", NetworkSpec { dropout_rate: 1.0, ..base.clone() }),
            ("conv_filters", NetworkSpec { conv_filters: vec![], ..base.clone() }),
        ];
        for (field, spec) in cases {
            assert!(spec.validate().unwrap_err().to_string().contains(field));
        }
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let spec = NetworkSpec::full_scale(ModelKind::Baseline);
        let p: Parameters<f64> = glorot_init(&spec, &mut StdRng::seed_from_u64(5)).unwrap();
        let q: Parameters<f64> = glorot_init(&spec, &mut StdRng::seed_from_u64(5)).unwrap();
        assert_eq!(p, q);
        let last = &p.head[2].weight;
        assert_eq!(last.shape(), &[2, 300]);
        let a = (6.0f64 / 302.0).sqrt();
        assert!((a - 0.1410).abs() < 1e-4);
        assert!(last.data().iter().all(|w| w.abs() <= a));
        let mean = last.data().iter().sum::<f64>() / last.len() as f64;
        // 600 draws of U[-a, a]: sd of the mean is a/sqrt(1800).
        assert!(mean.abs() < 4.0 * a / 1800f64.sqrt());
        for (_, t) in p.named().iter().filter(|(n, _)| n.ends_with("bias")) {
            assert!(t.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn symmetry_parameter_count() {
        let b = NetworkSpec::full_scale(ModelKind::Baseline);
        let s = b.with_kind(ModelKind::Symmetry);
        let pb: Parameters<f32> = glorot_init(&b, &mut StdRng::seed_from_u64(0)).unwrap();
        let ps: Parameters<f32> = glorot_init(&s, &mut StdRng::seed_from_u64(0)).unwrap();
        let extractor: usize = pb.streams[0].iter().map(|l| l.weight.len() + l.bias.len()).sum();
        let head: usize = ps.head.iter().map(|l| l.weight.len() + l.bias.len()).sum();
        assert_eq!(ps.head[0].weight.shape(), &[300, 256]);
        assert_eq!(ps.count(), 2 * extractor + head);
    }

    #[test]
    fn zero_input_zero_bias_gives_even_odds() {
        let spec = small(ModelKind::Baseline);
        let p: Parameters<f64> = glorot_init(&spec, &mut StdRng::seed_from_u64(1)).unwrap();
        let x = Tensor::zeros(&[3, 1, 24, 24]);
        let probs = baseline_forward(&spec, &p, &x, Mode::Inference).unwrap();
        assert!(probs.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn probabilities_sum_to_one_and_batch_order_is_equivariant() {
        let spec = small(ModelKind::Baseline);
        let mut rng = StdRng::seed_from_u64(2);
        let mut p: Parameters<f64> = glorot_init(&spec, &mut rng).unwrap();
        jitter_biases(&mut p, &mut rng);
        let x = random_input(4, 24, &mut rng);
        let probs = predict(&spec, &p, &[&x]).unwrap();
        for row in probs.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let plane = 24 * 24;
        let order = [2usize, 0, 3, 1];
        let mut permuted = Vec::new();
        for &i in &order {
            permuted.extend_from_slice(&x.data()[i * plane..(i + 1) * plane]);
        }
        let xp = Tensor::new(x.shape(), permuted).unwrap();
        let pp = predict(&spec, &p, &[&xp]).unwrap();
        for (k, &i) in order.iter().enumerate() {
            assert_eq!(&pp.data()[k * 2..k * 2 + 2], &probs.data()[i * 2..i * 2 + 2]);
        }
        assert_eq!(predict(&spec, &p, &[&x]).unwrap(), probs);
    }

    #[test]
    fn swapping_streams_and_inputs_is_a_relabeling() {
        let spec = small(ModelKind::Symmetry);
        let mut rng = StdRng::seed_from_u64(3);
        let p: Parameters<f64> = glorot_init(&spec, &mut rng).unwrap();
        let a = random_input(2, 24, &mut rng);
        let b = random_input(2, 24, &mut rng);
        let out = symmetry_forward(&spec, &p, &a, &b, Mode::Inference).unwrap();

        // Swapping streams also permutes the head's input columns.
        let mut q = p.clone();
        q.streams.swap(0, 1);
        let fw = spec.stream_features();
        let w = &p.head[0].weight;
        let (units, fin) = (w.dim(0), w.dim(1));
        let mut swapped = Vec::with_capacity(w.len());
        for u in 0..units {
            let row = &w.data()[u * fin..(u + 1) * fin];
            swapped.extend_from_slice(&row[fw..]);
            swapped.extend_from_slice(&row[..fw]);
        }
        q.head[0].weight = Tensor::new(w.shape(), swapped).unwrap();
        let out2 = symmetry_forward(&spec, &q, &b, &a, Mode::Inference).unwrap();
        for (x, y) in out.data().iter().zip(out2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_contralateral_patch_gives_zero_stream_features() {
        let spec = small(ModelKind::Symmetry);
        let mut rng = StdRng::seed_from_u64(4);
        let p: Parameters<f64> = glorot_init(&spec, &mut rng).unwrap();
        let a = random_input(2, 24, &mut rng);
        let z = Tensor::zeros(&[2, 1, 24, 24]);
        let pass = forward(&spec, &p, &[&a, &z], Mode::Inference).unwrap();
        let fw = spec.stream_features();
        for row in pass.features.data().chunks(2 * fw) {
            assert!(row[fw..].iter().all(|&v| v == 0.0));
            assert!(row[..fw].iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let spec = small(ModelKind::Baseline);
        let p: Parameters<f64> = glorot_init(&spec, &mut StdRng::seed_from_u64(0)).unwrap();
        assert!(predict(&spec, &p, &[&Tensor::zeros(&[1, 1, 23, 23])]).is_err());
        let sym = small(ModelKind::Symmetry);
        assert!(symmetry_forward(&sym, &p, &Tensor::zeros(&[1, 1, 24, 24]), &Tensor::zeros(&[1, 1, 24, 24]), Mode::Inference).is_err());
    }

    fn end_to_end_check(kind: ModelKind, seed: u64) {
        let spec = small(kind);
        let mut rng = StdRng::seed_from_u64(seed);
        let mut params: Parameters<f64> = glorot_init(&spec, &mut rng).unwrap();
        jitter_biases(&mut params, &mut rng);
        let n = 3;
        let inputs: Vec<Tensor<f64>> = (0..kind.streams()).map(|_| random_input(n, 24, &mut rng)).collect();
        let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let drop_seed = seed + 1000;

        let loss_of = |p: &Parameters<f64>| {
            let mut r = StdRng::seed_from_u64(drop_seed);
            let pass = forward(&spec, p, &refs, Mode::Train(&mut r)).unwrap();
            layers::cross_entropy(&pass.probs, &labels).unwrap().0
        };
        let mut r = StdRng::seed_from_u64(drop_seed);
        let pass = forward(&spec, &params, &refs, Mode::Train(&mut r)).unwrap();
        let (loss, grads) = backward(&spec, &params, &pass, &labels).unwrap();
        assert!((loss - loss_of(&params)).abs() < 1e-12);

        let analytic: Vec<f64> = grads.named().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let eps = 1e-6;
        let mut idx = 0;
        let n_tensors = params.named().len();
        for t in 0..n_tensors {
            let len = params.named()[t].1.len();
            for i in 0..len {
                let orig = params.tensors_mut()[t].data()[i];
                params.tensors_mut()[t].data_mut()[i] = orig + eps;
                let up = loss_of(&params);
                params.tensors_mut()[t].data_mut()[i] = orig - eps;
                let down = loss_of(&params);
                params.tensors_mut()[t].data_mut()[i] = orig;
                let num = (up - down) / (2.0 * eps);
                let a = analytic[idx];
                // Components below 1e-6 sit under the central-difference roundoff floor.
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-4, "{kind} seed {seed} {}[{i}]: analytic {a} numeric {num}", params.named()[t].0);
                idx += 1;
            }
        }
    }

    #[test]
    fn baseline_end_to_end_gradients_match_finite_differences() {
        for seed in 0..20 {
            end_to_end_check(ModelKind::Baseline, seed);
        }
    }

    #[test]
    fn symmetry_end_to_end_gradients_match_finite_differences() {
        for seed in 0..20 {
            end_to_end_check(ModelKind::Symmetry, 50 + seed);
        }
    }

    #[test]
    fn non_finite_input_names_the_layer() {
        let spec = small(ModelKind::Baseline);
        let p: Parameters<f64> = glorot_init(&spec, &mut StdRng::seed_from_u64(0)).unwrap();
        let mut x = Tensor::zeros(&[1, 1, 24, 24]);
        x.data_mut()[30] = f64::NAN;
        let err = predict(&spec, &p, &[&x]).unwrap_err().to_string();
        assert!(err.contains("stream0.conv0"), "{err}");
    }
}
