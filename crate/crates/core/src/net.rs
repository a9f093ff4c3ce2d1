//! The interlinked multi-column network: an image pyramid feeds parallel
//! columns at halving scales, columns exchange feature maps every round
//! (max-pool down from the finer neighbor, nearest-neighbor up from the
//! coarser), outputs merge coarse-to-fine into column 1, and a final linear
//! convolution produces per-pixel class logits.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{ConvParam, Graph, ParamSet};
use crate::ops;
use crate::tensor::{BiasVec, Tensor3, Tensor4};

/// Architecture hyperparameters of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct IcnnConfig {
    /// Number of parallel columns; column `k` sees the input at scale `1/2^k`.
    pub num_columns: usize,
    /// Output classes.
    pub num_labels: usize,
    /// Interlink-then-convolve rounds before output integration.
    pub interlink_rounds: usize,
    /// Feature maps each column produces per round.
    pub maps_per_column: Vec<usize>,
    /// Receptive field of every column and integration convolution.
    pub kernel_size: usize,
    /// Receptive field of the final linear convolution.
    pub final_kernel_size: usize,
    /// Channels of the input image.
    pub input_channels: usize,
}

impl IcnnConfig {
    /// Defaults sized for desk-scale training: four columns, three rounds,
    /// eight maps per column, 5x5 fields and a 9x9 final field.
    pub fn with_labels(num_labels: usize) -> Self {
        IcnnConfig {
            num_columns: 4,
            num_labels,
            interlink_rounds: 3,
            maps_per_column: vec![8; 4],
            kernel_size: 5,
            final_kernel_size: 9,
            input_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_columns < 2 {
            return Err(Error::Config(format!(
                "num_columns must be >= 2, got {}",
                self.num_columns
            )));
        }
        if self.num_labels < 2 {
            return Err(Error::Config(format!("num_labels must be >= 2, got {}", self.num_labels)));
        }
        if self.interlink_rounds < 1 {
            return Err(Error::Config("interlink_rounds must be >= 1".into()));
        }
        if self.maps_per_column.len() != self.num_columns {
            return Err(Error::Config(format!(
                "maps_per_column has {} entries for {} columns",
                self.maps_per_column.len(),
                self.num_columns
            )));
        }
        if self.maps_per_column.iter().any(|&m| m == 0) {
            return Err(Error::Config("maps_per_column entries must be >= 1".into()));
        }
        if self.kernel_size % 2 == 0 || self.final_kernel_size % 2 == 0 {
            return Err(Error::Config("kernel sizes must be odd".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Channels feeding column `k`'s convolution in round `round`: its own
    /// maps plus the pooled finer neighbor and the upsampled coarser one.
    pub fn interlink_in_channels(&self, k: usize, round: usize) -> usize {
        let source = |col: usize| {
            if round == 0 {
                self.input_channels
            } else {
                self.maps_per_column[col]
            }
        };
        let mut c = source(k);
        if k > 0 {
            c += source(k - 1);
        }
        if k + 1 < self.num_columns {
            c += source(k + 1);
        }
        c
    }

    /// Channels feeding the integration convolution that merges source
    /// column `s` into column `s - 1`.
    pub fn integration_in_channels(&self, s: usize) -> usize {
        self.maps_per_column[s] + self.maps_per_column[s - 1]
    }

    // Parameter slot layout: all rounds of column 0, all rounds of column 1,
    // ..., then integration merges for source columns K-1 down to 1, then
    // the final linear convolution. The checkpoint writer walks this order.

    pub fn slot_column(&self, k: usize, round: usize) -> usize {
        k * self.interlink_rounds + round
    }

    pub fn slot_integration(&self, s: usize) -> usize {
        self.num_columns * self.interlink_rounds + (self.num_columns - 1 - s)
    }

    pub fn slot_final(&self) -> usize {
        self.num_columns * self.interlink_rounds + (self.num_columns - 1)
    }

    pub fn num_slots(&self) -> usize {
        self.num_columns * self.interlink_rounds + self.num_columns
    }

    /// Expected kernel dims for each slot, in slot order.
    pub fn slot_dims(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut dims = Vec::with_capacity(self.num_slots());
        for k in 0..self.num_columns {
            for round in 0..self.interlink_rounds {
                dims.push((
                    self.kernel_size,
                    self.kernel_size,
                    self.interlink_in_channels(k, round),
                    self.maps_per_column[k],
                ));
            }
        }
        for s in (1..self.num_columns).rev() {
            dims.push((
                self.kernel_size,
                self.kernel_size,
                self.integration_in_channels(s),
                self.maps_per_column[s - 1],
            ));
        }
        dims.push((
            self.final_kernel_size,
            self.final_kernel_size,
            self.maps_per_column[0],
            self.num_labels,
        ));
        dims
    }

    /// The input spatial size must survive `num_columns - 1` halvings.
    pub fn check_input_dims(&self, h: usize, w: usize, c: usize) -> Result<()> {
        let div = 1 << (self.num_columns - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} not divisible by {div} for {} columns",
                self.num_columns
            )));
        }
        if c != self.input_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, config expects {}",
                self.input_channels
            )));
        }
        Ok(())
    }
}

/// Draw fresh parameters: kernels uniform in `[-s, s]` with
/// `s = sqrt(6 / (fan_in + fan_out))`, fans counted over the kernel window,
/// biases zero. Deterministic per seed.
pub fn init_params(config: &IcnnConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(config.num_slots());
    for (kh, kw, cin, cout) in config.slot_dims() {
        let fan_in = kh * kw * cin;
        let fan_out = kh * kw * cout;
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..kh * kw * cin * cout).map(|_| rng.gen_range(-s..s)).collect();
        pairs.push(ConvParam {
            kernel: Tensor4::new(kh, kw, cin, cout, data)?,
            bias: BiasVec::zeros(cout),
        });
    }
    Ok(ParamSet::new(pairs))
}

/// Check that every kernel's dims match what the architecture will feed it.
pub fn validate_params(config: &IcnnConfig, params: &ParamSet) -> Result<()> {
    let dims = config.slot_dims();
    if params.len() != dims.len() {
        return Err(Error::Config(format!(
            "parameter set has {} slots, config requires {}",
            params.len(),
            dims.len()
        )));
    }
    for (i, want) in dims.iter().enumerate() {
        let got = params.pair(i).kernel.dims();
        if got != *want {
            return Err(Error::Config(format!(
                "slot {i}: kernel dims {got:?} do not match required {want:?}"
            )));
        }
        if params.pair(i).bias.len() != want.3 {
            return Err(Error::Config(format!("slot {i}: bias length mismatch")));
        }
    }
    Ok(())
}

/// Mean-pool pyramid: element 0 is the input, element `k` has been halved
/// `k` times. Spatial dims must divide evenly through every level.
pub fn build_pyramid(input: &Tensor3, levels: usize) -> Result<Vec<Tensor3>> {
    let (h, w, _) = input.shape();
    let div = 1usize << (levels - 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::Shape(format!(
            "pyramid input {h}x{w} not divisible by {div} over {levels} levels"
        )));
    }
    let mut out = vec![input.clone()];
    for _ in 1..levels {
        out.push(ops::mean_pool2(out.last().expect("nonempty")));
    }
    Ok(out)
}

/// One interlinking round: per column, concatenate (pooled finer neighbor,
/// own maps, upsampled coarser neighbor) in that fixed order, then convolve
/// and tanh. Spatial dims per column are unchanged.
pub fn interlink_round(features: &[Tensor3], params: &[ConvParam]) -> Result<Vec<Tensor3>> {
    let k_cols = features.len();
    if params.len() != k_cols {
        return Err(Error::Config(format!(
            "interlink_round: {} columns but {} params",
            k_cols,
            params.len()
        )));
    }
    for k in 1..k_cols {
        let (ph, pw, _) = features[k - 1].shape();
        let (h, w, _) = features[k].shape();
        if (ph, pw) != (2 * h, 2 * w) {
            return Err(Error::Shape(format!(
                "interlink scale chain broken between columns {} ({ph}x{pw}) and {k} ({h}x{w})",
                k - 1
            )));
        }
    }
    let mut next = Vec::with_capacity(k_cols);
    for k in 0..k_cols {
        let down = if k > 0 { Some(ops::max_pool2(&features[k - 1])) } else { None };
        let up = if k + 1 < k_cols { Some(ops::upsample_nn2(&features[k + 1])) } else { None };
        let mut parts: Vec<&Tensor3> = Vec::with_capacity(3);
        if let Some(d) = &down {
            parts.push(d);
        }
        parts.push(&features[k]);
        if let Some(u) = &up {
            parts.push(u);
        }
        let cat = ops::concat_channels(&parts)?;
        next.push(ops::tanh_map(&ops::conv2d_same(&cat, &params[k].kernel, &params[k].bias)?));
    }
    Ok(next)
}

/// Coarse-to-fine output integration: working from the coarsest column in,
/// upsample its final maps, concatenate (upsampled, next finer column's
/// maps) and convolve with tanh. Returns column 0's final maps.
pub fn integrate_outputs(features: &[Tensor3], params: &[ConvParam]) -> Result<Tensor3> {
    let k_cols = features.len();
    if params.len() != k_cols - 1 {
        return Err(Error::Config(format!(
            "integrate_outputs: {} columns need {} params, got {}",
            k_cols,
            k_cols - 1,
            params.len()
        )));
    }
    let mut fin = features[k_cols - 1].clone();
    for (step, s) in (1..k_cols).rev().enumerate() {
        let up = ops::upsample_nn2(&fin);
        let cat = ops::concat_channels(&[&up, &features[s - 1]])?;
        let p = &params[step];
        fin = ops::tanh_map(&ops::conv2d_same(&cat, &p.kernel, &p.bias)?);
    }
    Ok(fin)
}

/// A built network: the config plus its DAG. Parameters are passed to each
/// call so a training driver can own the single mutable copy.
#[derive(Debug, Clone)]
pub struct Icnn {
    config: IcnnConfig,
    graph: Graph,
}

impl Icnn {
    pub fn new(config: IcnnConfig) -> Result<Self> {
        config.validate()?;
        let graph = build_graph(&config);
        Ok(Icnn { config, graph })
    }

    pub fn config(&self) -> &IcnnConfig {
        &self.config
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Pre-softmax class maps, same spatial size as the input.
    pub fn forward_logits(&self, params: &ParamSet, image: &Tensor3) -> Result<Tensor3> {
        let (h, w, c) = image.shape();
        self.config.check_input_dims(h, w, c)?;
        let acts = self.graph.forward(params, image)?;
        Ok(acts.output(&self.graph).clone())
    }

    /// Per-pixel class probabilities (softmax over the logits).
    pub fn forward_probs(&self, params: &ParamSet, image: &Tensor3) -> Result<Tensor3> {
        Ok(ops::softmax_channels(&self.forward_logits(params, image)?))
    }

    /// Cross-entropy loss and its gradients for one example.
    pub fn loss_and_grads(
        &self,
        params: &ParamSet,
        image: &Tensor3,
        target: &crate::tensor::LabelMap,
    ) -> Result<(f64, ParamSet)> {
        let (h, w, c) = image.shape();
        self.config.check_input_dims(h, w, c)?;
        let (loss, pg, _) = self.graph.loss_and_grads(params, image, target)?;
        Ok((loss, pg))
    }
}

fn build_graph(config: &IcnnConfig) -> Graph {
    let k_cols = config.num_columns;
    let mut b = Graph::builder();
    let input = b.input();

    let mut feats: Vec<crate::layers::NodeId> = vec![input];
    for _ in 1..k_cols {
        feats.push(b.mean_pool2(*feats.last().expect("nonempty")));
    }

    for round in 0..config.interlink_rounds {
        let mut next = Vec::with_capacity(k_cols);
        for k in 0..k_cols {
            let mut parts = Vec::with_capacity(3);
            if k > 0 {
                parts.push(b.max_pool2(feats[k - 1]));
            }
            parts.push(feats[k]);
            if k + 1 < k_cols {
                parts.push(b.upsample_nn2(feats[k + 1]));
            }
            let cat = b.concat(&parts);
            next.push(b.conv_tanh(cat, config.slot_column(k, round)));
        }
        feats = next;
    }

    let mut fin = feats[k_cols - 1];
    for s in (1..k_cols).rev() {
        let up = b.upsample_nn2(fin);
        let cat = b.concat(&[up, feats[s - 1]]);
        fin = b.conv_tanh(cat, config.slot_integration(s));
    }

    let logits = b.conv_linear(fin, config.slot_final());
    b.finish(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::grad_check;
    use crate::tensor::LabelMap;

    fn small_config() -> IcnnConfig {
        IcnnConfig {
            num_columns: 2,
            num_labels: 2,
            interlink_rounds: 1,
            maps_per_column: vec![2, 2],
            kernel_size: 3,
            final_kernel_size: 3,
            input_channels: 2,
        }
    }

    #[test]
    fn pyramid_sizes_64_and_80() {
        let img64 = Tensor3::zeros(64, 64, 3);
        let p = build_pyramid(&img64, 4).unwrap();
        let sizes: Vec<usize> = p.iter().map(|t| t.height()).collect();
        assert_eq!(sizes, vec![64, 32, 16, 8]);

        let img80 = Tensor3::zeros(80, 80, 3);
        let p = build_pyramid(&img80, 4).unwrap();
        let sizes: Vec<usize> = p.iter().map(|t| t.height()).collect();
        assert_eq!(sizes, vec![80, 40, 20, 10]);
    }

    #[test]
    fn pyramid_keeps_constants_constant() {
        let img = Tensor3::filled(32, 32, 3, 0.4);
        for level in build_pyramid(&img, 4).unwrap() {
            assert!(level.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        }
    }

    #[test]
    fn pyramid_rejects_indivisible_dims() {
        let img = Tensor3::zeros(60, 64, 3);
        assert!(matches!(build_pyramid(&img, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn interlink_channel_arithmetic_k4() {
        let cfg = IcnnConfig {
            num_columns: 4,
            num_labels: 2,
            interlink_rounds: 2,
            maps_per_column: vec![8; 4],
            kernel_size: 5,
            final_kernel_size: 9,
            input_channels: 3,
        };
        let got: Vec<usize> = (0..4).map(|k| cfg.interlink_in_channels(k, 1)).collect();
        assert_eq!(got, vec![16, 24, 24, 16]);
        let round0: Vec<usize> = (0..4).map(|k| cfg.interlink_in_channels(k, 0)).collect();
        assert_eq!(round0, vec![6, 9, 9, 6]);
    }

    #[test]
    fn interlink_round_runs_and_preserves_dims() {
        let cfg = small_config();
        let params = init_params(&cfg, 3).unwrap();
        let f0 = Tensor3::filled(8, 8, 2, 0.1);
        let f1 = Tensor3::filled(4, 4, 2, -0.2);
        let out = interlink_round(
            &[f0, f1],
            &[params.pair(cfg.slot_column(0, 0)).clone(), params.pair(cfg.slot_column(1, 0)).clone()],
        )
        .unwrap();
        assert_eq!(out[0].shape(), (8, 8, 2));
        assert_eq!(out[1].shape(), (4, 4, 2));
    }

    #[test]
    fn interlink_rejects_broken_scale_chain() {
        let cfg = small_config();
        let params = init_params(&cfg, 3).unwrap();
        let f0 = Tensor3::zeros(8, 8, 2);
        let f1 = Tensor3::zeros(3, 3, 2);
        let err = interlink_round(
            &[f0, f1],
            &[params.pair(0).clone(), params.pair(1).clone()],
        );
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn interlink_zero_features_give_uniform_tanh_bias() {
        let f0 = Tensor3::zeros(8, 8, 2);
        let f1 = Tensor3::zeros(4, 4, 2);
        let mk = |cin: usize| ConvParam {
            kernel: Tensor4::zeros(3, 3, cin, 2).unwrap(),
            bias: BiasVec::new(vec![0.5, -0.25]),
        };
        let out = interlink_round(&[f0, f1], &[mk(4), mk(4)]).unwrap();
        for col in &out {
            for r in 0..col.height() {
                for c in 0..col.width() {
                    assert!((col.get(r, c, 0) - 0.5f64.tanh()).abs() < 1e-15);
                    assert!((col.get(r, c, 1) - (-0.25f64).tanh()).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn integration_ignores_zeroed_coarse_column() {
        // kernel keeps only the fine column's channels (delta taps), so a
        // zeroed coarse column must not influence the result
        let fine = Tensor3::from_fn(8, 8, 2, |r, c, ch| ((r + c + ch) as f64 * 0.05).sin() * 0.3);
        let coarse = Tensor3::zeros(4, 4, 2);
        let mut kernel = Tensor4::zeros(1, 1, 4, 2).unwrap();
        // concat order is (upsampled coarse, fine): fine occupies channels 2..4
        kernel.set(0, 0, 2, 0, 1.0);
        kernel.set(0, 0, 3, 1, 1.0);
        let p = ConvParam { kernel, bias: BiasVec::zeros(2) };
        let out = integrate_outputs(&[fine.clone(), coarse], &[p]).unwrap();
        assert_eq!(out, ops::tanh_map(&fine));
    }

    #[test]
    fn integration_output_is_full_resolution() {
        let cfg = IcnnConfig {
            num_columns: 4,
            num_labels: 3,
            interlink_rounds: 1,
            maps_per_column: vec![2; 4],
            kernel_size: 3,
            final_kernel_size: 3,
            input_channels: 3,
        };
        let net = Icnn::new(cfg.clone()).unwrap();
        let params = init_params(&cfg, 5).unwrap();
        let img = Tensor3::filled(64, 64, 3, 0.2);
        let probs = net.forward_probs(&params, &img).unwrap();
        assert_eq!(probs.shape(), (64, 64, 3));
    }

    #[test]
    fn forward_shapes_for_stage_configs() {
        let mut cfg = IcnnConfig::with_labels(9);
        cfg.maps_per_column = vec![2; 4];
        let net = Icnn::new(cfg.clone()).unwrap();
        let params = init_params(&cfg, 1).unwrap();
        let img = Tensor3::filled(64, 64, 3, 0.1);
        assert_eq!(net.forward_probs(&params, &img).unwrap().shape(), (64, 64, 9));

        let mut cfg = IcnnConfig::with_labels(4);
        cfg.maps_per_column = vec![2; 4];
        let net = Icnn::new(cfg.clone()).unwrap();
        let params = init_params(&cfg, 1).unwrap();
        let img = Tensor3::filled(80, 80, 3, 0.1);
        assert_eq!(net.forward_probs(&params, &img).unwrap().shape(), (80, 80, 4));
    }

    #[test]
    fn forward_probabilities_sum_to_one() {
        let cfg = small_config();
        let net = Icnn::new(cfg.clone()).unwrap();
        let params = init_params(&cfg, 7).unwrap();
        let img = Tensor3::from_fn(8, 8, 2, |r, c, ch| ((r * 13 + c * 5 + ch) as f64).sin());
        let probs = net.forward_probs(&params, &img).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let s: f64 = (0..2).map(|ch| probs.get(r, c, ch)).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_config();
        let net = Icnn::new(cfg.clone()).unwrap();
        let params = init_params(&cfg, 9).unwrap();
        let img = Tensor3::from_fn(8, 8, 2, |r, c, _| (r as f64 - c as f64) * 0.1);
        let a = net.forward_probs(&params, &img).unwrap();
        let b = net.forward_probs(&params, &img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn graph_forward_matches_standalone_composition() {
        let cfg = IcnnConfig {
            num_columns: 3,
            num_labels: 3,
            interlink_rounds: 2,
            maps_per_column: vec![3, 2, 2],
            kernel_size: 3,
            final_kernel_size: 5,
            input_channels: 2,
        };
        let net = Icnn::new(cfg.clone()).unwrap();
        let params = init_params(&cfg, 17).unwrap();
        let img = Tensor3::from_fn(16, 16, 2, |r, c, ch| ((r * 7 + c * 3 + ch) as f64 * 0.11).cos());

        let mut feats = build_pyramid(&img, cfg.num_columns).unwrap();
        for round in 0..cfg.interlink_rounds {
            let round_params: Vec<ConvParam> = (0..cfg.num_columns)
                .map(|k| params.pair(cfg.slot_column(k, round)).clone())
                .collect();
            feats = interlink_round(&feats, &round_params).unwrap();
        }
        let int_params: Vec<ConvParam> = (1..cfg.num_columns)
            .rev()
            .map(|s| params.pair(cfg.slot_integration(s)).clone())
            .collect();
        let merged = integrate_outputs(&feats, &int_params).unwrap();
        let fp = params.pair(cfg.slot_final());
        let logits = ops::conv2d_same(&merged, &fp.kernel, &fp.bias).unwrap();

        assert_eq!(net.forward_logits(&params, &img).unwrap(), logits);
    }

    #[test]
    fn coarsest_column_receives_gradient() {
        let cfg = IcnnConfig {
            num_columns: 4,
            num_labels: 3,
            interlink_rounds: 1,
            maps_per_column: vec![2; 4],
            kernel_size: 3,
            final_kernel_size: 3,
            input_channels: 2,
        };
        let net = Icnn::new(cfg.clone()).unwrap();
        let params = init_params(&cfg, 31).unwrap();
        let img = Tensor3::from_fn(16, 16, 2, |r, c, _| ((r * 3 + c) as f64 * 0.2).sin());
        let target = LabelMap::new(16, 16, 3, (0..256).map(|i| (i % 3) as u8).collect()).unwrap();
        let (_, grads) = net.loss_and_grads(&params, &img, &target).unwrap();
        let coarsest = grads.pair(cfg.slot_column(3, 0));
        let norm: f64 = coarsest.kernel.data().iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "no gradient path to the coarsest column");
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = IcnnConfig::with_labels(9);
        let a = init_params(&cfg, 42).unwrap();
        let b = init_params(&cfg, 42).unwrap();
        assert_eq!(a, b);
        for p in a.pairs() {
            assert!(p.bias.values().iter().all(|&v| v == 0.0));
        }
        let c = init_params(&cfg, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_kernel_mean_is_statistically_zero() {
        let cfg = IcnnConfig::with_labels(9);
        let params = init_params(&cfg, 99).unwrap();
        let dims = cfg.slot_dims();
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, (kh, kw, cin, cout)) in dims.iter().enumerate() {
            let s = (6.0 / ((kh * kw * cin) + (kh * kw * cout)) as f64).sqrt();
            for &v in params.pair(i).kernel.data() {
                sum += v / s;
                n += 1;
            }
        }
        assert!(n >= 10_000, "need >= 1e4 draws, got {n}");
        let mean = sum / n as f64;
        // normalized draws are uniform on [-1, 1]: var 1/3
        let three_sigma = 3.0 / (3.0 * n as f64).sqrt();
        assert!(mean.abs() < three_sigma, "|{mean}| >= {three_sigma}");
    }

    #[test]
    fn validate_params_catches_wrong_dims() {
        let cfg = small_config();
        let params = init_params(&cfg, 1).unwrap();
        assert!(validate_params(&cfg, &params).is_ok());
        let mut other = cfg.clone();
        other.maps_per_column = vec![3, 3];
        assert!(matches!(validate_params(&other, &params), Err(Error::Config(_))));
    }

    #[test]
    fn reduced_end_to_end_grad_check() {
        let cfg = IcnnConfig {
            num_columns: 2,
            num_labels: 2,
            interlink_rounds: 1,
            maps_per_column: vec![2, 2],
            kernel_size: 3,
            final_kernel_size: 3,
            input_channels: 2,
        };
        let net = Icnn::new(cfg.clone()).unwrap();
        let params = init_params(&cfg, 8).unwrap();
        let img = Tensor3::from_fn(8, 8, 2, |r, c, ch| ((r * 5 + c * 3 + ch) as f64 * 0.37).sin());
        let target = LabelMap::new(8, 8, 2, (0..64).map(|i| (i % 2) as u8).collect()).unwrap();
        let err = grad_check(net.graph(), &params, &img, &target, 1e-5, 200, 77).unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }
}
