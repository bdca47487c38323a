use super::layers::{
    bn_backward, bn_forward_eval, bn_forward_train, conv_backward, conv_forward, maxpool_backward,
    maxpool_forward, relu_backward, relu_inplace, Act, BnCache, Window, BN_MOMENTUM,
};
use super::params::{Init, ParamGroup, ParamSpec, ParamStore};
use crate::archspec::{compute_rf_profile, ArchSpec, LayerKind, RfProfile};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Backbone output with the geometry that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Act<T>,
    pub profile: RfProfile,
}

/// Parameter names of one convolution unit.
pub struct UnitKeys {
    pub weight: String,
    pub bias: String,
    pub gamma: String,
    pub beta: String,
    pub running_mean: String,
    pub running_var: String,
}

impl UnitKeys {
    pub fn new(layer: &str) -> Self {
        Self {
            weight: format!("{layer}.weight"),
            bias: format!("{layer}.bias"),
            gamma: format!("{layer}.bn_gamma"),
            beta: format!("{layer}.bn_beta"),
            running_mean: format!("{layer}.bn_mean"),
            running_var: format!("{layer}.bn_var"),
        }
    }
}

/// How a forward pass treats each layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardMode {
    /// Batch statistics for trainable normalization layers, and a tape for backward.
    pub train: bool,
    /// Per layer. Frozen layers normalize with running statistics even when training.
    pub trainable: Vec<bool>,
}

impl ForwardMode {
    pub fn train(layers: usize) -> Self {
        Self { train: true, trainable: vec![true; layers] }
    }

    pub fn eval(layers: usize) -> Self {
        Self { train: false, trainable: vec![false; layers] }
    }

    /// First layer that needs a tape, or `None` when nothing is trained.
    fn record_from(&self) -> Option<usize> {
        if self.train {
            self.trainable.iter().position(|t| *t)
        } else {
            None
        }
    }
}

enum LayerTape<T> {
    Conv {
        input_shape: (usize, usize, usize, usize),
        cols: Vec<T>,
        bn: Option<BnCache<T>>,
        out: Act<T>,
    },
    Pool {
        input_shape: (usize, usize, usize, usize),
        argmax: Vec<usize>,
    },
}

/// Intermediate values of one forward pass, consumed by [`Backbone::backward`].
pub struct BackboneTape<T> {
    layers: Vec<Option<LayerTape<T>>>,
    mode: ForwardMode,
}

/// A plain chain of `conv -> [batch norm] -> relu` units and max pools.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    arch: ArchSpec,
    batch_norm: bool,
    widths: Vec<usize>,
    profile: RfProfile,
}

impl Backbone {
    pub fn new(arch: ArchSpec, batch_norm: bool) -> Result<Self> {
        let widths = arch.channel_widths()?;
        let profile = compute_rf_profile(&arch)?;
        Ok(Self { arch, batch_norm, widths, profile })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn batch_norm(&self) -> bool {
        self.batch_norm
    }

    pub fn profile(&self) -> RfProfile {
        self.profile
    }

    pub fn num_layers(&self) -> usize {
        self.arch.layers().len()
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("non-empty architecture")
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match (self.arch.output_len(h), self.arch.output_len(w)) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::InsufficientInput {
                size: h.min(w),
                message: "some layer of the backbone produces an empty map".into(),
            }),
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut in_c = self.arch.input_channels();
        for (i, layer) in self.arch.layers().iter().enumerate() {
            let out_c = self.widths[i];
            if layer.kind == LayerKind::Conv {
                let group = ParamGroup::Block(self.arch.block_of(i));
                let keys = UnitKeys::new(&layer.name);
                let fan_in = in_c * layer.kernel * layer.kernel;
                let mut push = |name: String, init, trainable| {
                    specs.push(ParamSpec { name, shape: vec![], init, trainable, group })
                };
                push(keys.weight, Init::Kaiming { fan_in }, true);
                push(keys.bias, Init::Zeros, true);
                if self.batch_norm {
                    push(keys.gamma, Init::Ones, true);
                    push(keys.beta, Init::Zeros, true);
                    push(keys.running_mean, Init::Zeros, false);
                    push(keys.running_var, Init::Ones, false);
                }
                let n = specs.len();
                specs[n - if self.batch_norm { 6 } else { 2 }].shape =
                    vec![out_c, in_c, layer.kernel, layer.kernel];
                for s in &mut specs[n - if self.batch_norm { 5 } else { 1 }..] {
                    s.shape = vec![out_c];
                }
            }
            in_c = out_c;
        }
        specs
    }

    /// Layer indices whose parameters belong to `group`'s block.
    pub fn layers_in_block(&self, block: usize) -> std::ops::Range<usize> {
        self.arch.block_range(block)
    }

    pub fn forward<T: Real>(
        &self,
        params: &ParamStore<T>,
        input: &Act<T>,
        mode: &ForwardMode,
    ) -> Result<(FeatureMap<T>, BackboneTape<T>)> {
        if input.c != self.arch.input_channels() {
            return Err(Error::Shape(format!(
                "backbone expects {} input channels, got {}",
                self.arch.input_channels(),
                input.c
            )));
        }
        if mode.trainable.len() != self.num_layers() {
            return Err(Error::Shape("forward mode does not match the layer count".into()));
        }
        self.output_size(input.h, input.w)?;
        let record_from = mode.record_from();
        let mut tape: Vec<Option<LayerTape<T>>> = Vec::with_capacity(self.num_layers());
        let mut x = input.clone();
        for (i, layer) in self.arch.layers().iter().enumerate() {
            let win = Window { kernel: layer.kernel, stride: layer.stride, padding: layer.padding };
            let input_shape = (x.c, x.b, x.h, x.w);
            let record = record_from.is_some_and(|r| i >= r);
            match layer.kind {
                LayerKind::Conv => {
                    let keys = UnitKeys::new(&layer.name);
                    let conv = conv_forward(
                        &x,
                        params.get(&keys.weight).data(),
                        params.get(&keys.bias).data(),
                        self.widths[i],
                        win,
                    )?;
                    let mut out = conv.out;
                    let bn = self.batch_norm.then(|| {
                        let gamma = params.get(&keys.gamma).data();
                        let beta = params.get(&keys.beta).data();
                        if mode.train && mode.trainable[i] {
                            bn_forward_train(&mut out, gamma, beta)
                        } else {
                            bn_forward_eval(
                                &mut out,
                                gamma,
                                beta,
                                params.get(&keys.running_mean).data(),
                                params.get(&keys.running_var).data(),
                            )
                        }
                    });
                    relu_inplace(&mut out);
                    tape.push(record.then(|| LayerTape::Conv {
                        input_shape,
                        cols: conv.cols,
                        bn,
                        out: out.clone(),
                    }));
                    x = out;
                }
                LayerKind::Pool => {
                    let pooled = maxpool_forward(&x, win)?;
                    tape.push(record.then_some(LayerTape::Pool { input_shape, argmax: pooled.argmax }));
                    x = pooled.out;
                }
            }
        }
        Ok((
            FeatureMap { values: x, profile: self.profile },
            BackboneTape { layers: tape, mode: mode.clone() },
        ))
    }

    /// Accumulates parameter gradients of trainable layers into `grads`; returns the gradient
    /// with respect to the input when the first layer is trainable.
    pub fn backward<T: Real>(
        &self,
        params: &ParamStore<T>,
        tape: &BackboneTape<T>,
        d_out: Act<T>,
        grads: &mut ParamStore<T>,
    ) -> Option<Act<T>> {
        let record_from = tape.mode.record_from()?;
        let mut d = d_out;
        for i in (record_from..self.num_layers()).rev() {
            let layer = &self.arch.layers()[i];
            let win = Window { kernel: layer.kernel, stride: layer.stride, padding: layer.padding };
            let trainable = tape.mode.trainable[i];
            let need_input = i > record_from || record_from == 0;
            match tape.layers[i].as_ref().expect("recorded layer") {
                LayerTape::Conv { input_shape, cols, bn, out } => {
                    let keys = UnitKeys::new(&layer.name);
                    relu_backward(&mut d, out);
                    if let Some(cache) = bn {
                        let (dg, db) = bn_backward(&mut d, cache, params.get(&keys.gamma).data());
                        if trainable {
                            grads.accumulate(&keys.gamma, &[dg.len()], &dg);
                            grads.accumulate(&keys.beta, &[db.len()], &db);
                        }
                    }
                    let weight = params.get(&keys.weight);
                    let g = conv_backward(&d, cols, weight.data(), *input_shape, win, need_input, trainable);
                    if let (Some(dw), Some(db)) = (g.d_weight, g.d_bias) {
                        grads.accumulate(&keys.weight, weight.shape(), &dw);
                        grads.accumulate(&keys.bias, &[db.len()], &db);
                    }
                    d = g.d_input?;
                }
                LayerTape::Pool { input_shape, argmax } => {
                    if !need_input {
                        return None;
                    }
                    d = maxpool_backward(&d, argmax, *input_shape);
                }
            }
        }
        Some(d)
    }

    /// Moves running statistics of every normalization layer that used batch statistics.
    pub fn update_running_stats<T: Real>(&self, params: &mut ParamStore<T>, tape: &BackboneTape<T>) {
        let m = T::lit(BN_MOMENTUM);
        for (layer, rec) in self.arch.layers().iter().zip(&tape.layers) {
            let Some(LayerTape::Conv { bn: Some(cache), .. }) = rec else { continue };
            if !cache.batch_stats {
                continue;
            }
            let n = cache.xhat.len() / cache.mean.len().max(1);
            let unbias = if n > 1 { T::from_usize_lossy(n) / T::from_usize_lossy(n - 1) } else { T::one() };
            let keys = UnitKeys::new(&layer.name);
            for (r, v) in params.get_mut(&keys.running_mean).data_mut().iter_mut().zip(&cache.mean) {
                *r = (T::one() - m) * *r + m * *v;
            }
            for (r, v) in params.get_mut(&keys.running_var).data_mut().iter_mut().zip(&cache.var) {
                *r = (T::one() - m) * *r + m * *v * unbias;
            }
        }
    }
}
