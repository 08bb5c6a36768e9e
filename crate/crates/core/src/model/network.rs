use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{CoreMode, ModelConfig, OutputNonlinearity, ResidualMode, LATENT_SIZE};
use super::params::{ParamStore, StatsStore};
use crate::error::{shape_err, Result};
use crate::tensor::ops::BatchNormMode;
use crate::tensor::{ConvSpec, Element, Graph, Tensor, Var};

/// Encoder output for one frame.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// State latent, N×N_s×4×4.
    pub s: Var,
    /// Transformational latent, N×N_d×4×4.
    pub d: Var,
    /// Post-activation outputs of the stride-2 layers, first to last.
    pub activations: Vec<Var>,
}

/// Hidden and cell maps of each ConvLSTM layer.
#[derive(Debug, Clone)]
pub struct CoreState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
}

impl CoreState {
    /// Current transformation estimate: the top layer's hidden map.
    pub fn g(&self) -> Var {
        *self.h.last().expect("core has at least one layer")
    }
}

/// Carried activations of the weighted residual connections.
#[derive(Debug, Clone, Default)]
pub struct ResidualState {
    pub layers: Vec<Var>,
    pub image: Option<Var>,
}

enum Stats<'a, T: Element> {
    Train(&'a mut StatsStore<T>),
    Eval(&'a StatsStore<T>),
    Refit(&'a mut StatsStore<T>, f64),
}

/// One forward pass recorded on a fresh [`Graph`].
pub struct Forward<'a, T: Element> {
    pub graph: Graph<T>,
    config: &'a ModelConfig,
    params: &'a ParamStore<T>,
    vars: Vec<Var>,
    stats: Stats<'a, T>,
    rng: ChaCha8Rng,
}

/// One ConvLSTM update without peephole connections.
///
/// Gates come from a single convolution over `[x, h]` with `4·hidden`
/// filters ordered input, forget, output, candidate.
#[allow(clippy::too_many_arguments)]
pub fn convlstm_step<T: Element>(
    graph: &mut Graph<T>,
    x: Var,
    h: Var,
    c: Var,
    w: Var,
    b: Var,
    hidden: usize,
    kernel: usize,
) -> Result<(Var, Var)> {
    let xh = graph.concat_channels(x, h)?;
    let z = graph.conv2d(xh, w, Some(b), ConvSpec::same(kernel, 1, 4 * hidden))?;
    let zi = graph.slice_channels(z, 0, hidden)?;
    let zf = graph.slice_channels(z, hidden, hidden)?;
    let zo = graph.slice_channels(z, 2 * hidden, hidden)?;
    let zg = graph.slice_channels(z, 3 * hidden, hidden)?;
    let i = graph.sigmoid(zi);
    let f = graph.sigmoid(zf);
    let o = graph.sigmoid(zo);
    let cand = graph.tanh(zg);
    let keep = graph.mul(f, c)?;
    let write = graph.mul(i, cand)?;
    let c_next = graph.add(keep, write)?;
    let squashed = graph.tanh(c_next);
    let h_next = graph.mul(o, squashed)?;
    Ok((h_next, c_next))
}

impl<'a, T: Element> Forward<'a, T> {
    pub(super) fn new_train(
        config: &'a ModelConfig,
        params: &'a ParamStore<T>,
        stats: &'a mut StatsStore<T>,
        seed: u64,
    ) -> Self {
        let mut graph = Graph::new();
        let vars = params.iter().map(|p| graph.param(p.value.clone())).collect();
        Self {
            graph,
            config,
            params,
            vars,
            stats: Stats::Train(stats),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(super) fn new_eval(
        config: &'a ModelConfig,
        params: &'a ParamStore<T>,
        stats: &'a StatsStore<T>,
    ) -> Self {
        let mut graph = Graph::new();
        let vars = params.iter().map(|p| graph.constant(p.value.clone())).collect();
        Self {
            graph,
            config,
            params,
            vars,
            stats: Stats::Eval(stats),
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub(super) fn new_refit(
        config: &'a ModelConfig,
        params: &'a ParamStore<T>,
        stats: &'a mut StatsStore<T>,
        momentum: f64,
    ) -> Self {
        let mut graph = Graph::new();
        let vars = params.iter().map(|p| graph.constant(p.value.clone())).collect();
        Self {
            graph,
            config,
            params,
            vars,
            stats: Stats::Refit(stats, momentum),
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    pub fn is_train(&self) -> bool {
        matches!(self.stats, Stats::Train(_))
    }

    /// Graph handle of a named parameter.
    pub fn param(&self, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("model has no parameter {name}"));
        self.vars[i]
    }

    /// Graph handles of every parameter, in store order.
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv(&mut self, x: Var, prefix: &str, spec: ConvSpec) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        self.graph.conv2d(x, w, Some(b), spec)
    }

    fn conv_t(&mut self, x: Var, prefix: &str, spec: ConvSpec) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        self.graph.conv2d_transposed(x, w, Some(b), spec)
    }

    fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"));
        let beta = self.param(&format!("{prefix}.beta"));
        let graph = &mut self.graph;
        match &mut self.stats {
            Stats::Train(store) => {
                let i = store.position(prefix).expect("stats exist for every bn layer");
                graph.batch_norm(x, gamma, beta, BatchNormMode::Train(&mut store.entries[i].1))
            }
            Stats::Eval(store) => {
                let i = store.position(prefix).expect("stats exist for every bn layer");
                graph.batch_norm(x, gamma, beta, BatchNormMode::Eval(&store.entries[i].1))
            }
            Stats::Refit(store, momentum) => {
                let i = store.position(prefix).expect("stats exist for every bn layer");
                let mode = BatchNormMode::Refit(&mut store.entries[i].1, *momentum);
                graph.batch_norm(x, gamma, beta, mode)
            }
        }
    }

    pub fn frame(&mut self, frame: &Tensor<T>) -> Result<Var> {
        let c = self.config;
        let (_, ch, h, w) = frame.nchw()?;
        if (ch, h, w) != (c.image_channels, c.input_size, c.input_size) {
            return shape_err(format!(
                "frame {:?} does not match configured {}×{}×{}",
                frame.dims(),
                c.image_channels,
                c.input_size,
                c.input_size
            ));
        }
        Ok(self.graph.constant(frame.clone()))
    }

    /// Factorizes one frame into state and transformational latents.
    pub fn encode(&mut self, frame: Var) -> Result<Encoded> {
        Ok(self.encode_frames(&[frame])?.remove(0))
    }

    /// Encodes several frames in one pass. Frames are stacked along the batch
    /// axis, so batch norm sees statistics pooled over batch and time.
    pub fn encode_frames(&mut self, frames: &[Var]) -> Result<Vec<Encoded>> {
        let c = self.config;
        let k = c.kernel_size;
        let train = self.is_train();
        let steps = frames.len();
        let mut x = self.graph.stack_batch(frames)?;
        let mut activations = Vec::with_capacity(c.encoder_channels.len());
        for (i, &cout) in c.encoder_channels.iter().enumerate() {
            let prefix = format!("enc.{i}");
            let mut y = self.conv(x, &prefix, ConvSpec::same(k, 2, cout))?;
            if i > 0 {
                y = self.batch_norm(y, &prefix)?;
            }
            let a = self.graph.leaky_relu(y);
            activations.push(self.graph.unstack_batch(a, steps)?);
            x = self.graph.dropout(a, c.encoder_dropout, train, &mut self.rng)?;
        }
        let latent = c.state_channels + c.transform_channels;
        let y = self.conv(x, "enc.latent", ConvSpec::same(k, 1, latent))?;
        let y = self.batch_norm(y, "enc.latent")?;
        let z = self.graph.tanh(y);
        let (s, d) = self.graph.split_channels(z, c.state_channels)?;
        let s = self.graph.unstack_batch(s, steps)?;
        let d = self.graph.unstack_batch(d, steps)?;
        Ok((0..steps)
            .map(|t| Encoded {
                s: s[t],
                d: d[t],
                activations: activations.iter().map(|a| a[t]).collect(),
            })
            .collect())
    }

    pub fn core_init(&mut self, batch: usize) -> CoreState {
        let c = self.config;
        let dims = [batch, c.lstm_hidden, LATENT_SIZE, LATENT_SIZE];
        let mut h = Vec::with_capacity(c.lstm_layers);
        let mut cell = Vec::with_capacity(c.lstm_layers);
        for _ in 0..c.lstm_layers {
            h.push(self.graph.constant(Tensor::zeros(&dims)));
            cell.push(self.graph.constant(Tensor::zeros(&dims)));
        }
        CoreState { h, c: cell }
    }

    /// Feeds `[d, s]` through the ConvLSTM stack.
    pub fn accumulate_transform(&mut self, core: &CoreState, d: Var, s: Var) -> Result<CoreState> {
        let c = self.config;
        let mut x = self.graph.concat_channels(d, s)?;
        let mut next = CoreState {
            h: Vec::with_capacity(c.lstm_layers),
            c: Vec::with_capacity(c.lstm_layers),
        };
        for l in 0..c.lstm_layers {
            let w = self.param(&format!("lstm.{l}.w"));
            let b = self.param(&format!("lstm.{l}.b"));
            let (h, cell) = convlstm_step(
                &mut self.graph,
                x,
                core.h[l],
                core.c[l],
                w,
                b,
                c.lstm_hidden,
                c.lstm_kernel,
            )?;
            next.h.push(h);
            next.c.push(cell);
            x = h;
        }
        Ok(next)
    }

    /// Applies the transformation estimate `g` to state `s`, yielding the
    /// next state.
    pub fn apply_transform(&mut self, g: Var, s: Var) -> Result<Var> {
        let c = self.config;
        if c.core_mode == CoreMode::ConvlstmOnly {
            return Ok(g);
        }
        let mut x = self.graph.concat_channels(g, s)?;
        for i in 0..c.phi_layers {
            let last = i + 1 == c.phi_layers;
            let cout = if last { c.state_channels } else { c.phi_channels };
            let y = self.conv(x, &format!("phi.{i}"), ConvSpec::same(c.phi_kernel, 1, cout))?;
            x = if last {
                self.graph.tanh(y)
            } else {
                self.graph.leaky_relu(y)
            };
        }
        Ok(x)
    }

    /// Residual seeds taken from the encoder at the last input step.
    pub fn residual_seed(&mut self, last: &Encoded, last_frame: Var) -> Result<ResidualState> {
        let c = self.config;
        if !c.has_residuals() {
            return Ok(ResidualState::default());
        }
        let mut layers = Vec::with_capacity(c.decoder_channels.len());
        for (j, &cout) in c.decoder_channels.iter().enumerate() {
            let src = match c.residual_source(j) {
                Some(i) => last.activations[i],
                None => last_frame,
            };
            let seed = if c.residual_source_channels(j) != cout {
                self.conv(src, &format!("res.{j}.proj"), ConvSpec::same(1, 1, cout))?
            } else {
                src
            };
            layers.push(seed);
        }
        let image = c.has_image_residual().then_some(last_frame);
        Ok(ResidualState { layers, image })
    }

    /// Weighted residual: `(1 − σ(W)) ⊙ y + σ(W) ⊙ prev`, with the weight map
    /// `W` a 1×1 convolution of `pre` broadcast over channels.
    pub fn weighted_residual(&mut self, pre: Var, y: Var, prev: Var, prefix: &str) -> Result<Var> {
        let w = self.conv(pre, prefix, ConvSpec::same(1, 1, 1))?;
        let gate = self.graph.sigmoid(w);
        self.graph.gated_mix(y, prev, gate)
    }

    /// Renders a state latent into a frame. Only `s` enters the decoder.
    pub fn decode(&mut self, s: Var, residual: &ResidualState) -> Result<(Var, ResidualState)> {
        let (mut frames, carried) = self.decode_steps(&[s], residual, ResidualMode::Full)?;
        Ok((frames.remove(0), carried))
    }

    /// Decodes a run of state latents layer by layer, all steps stacked
    /// along the batch axis. The residual input of step `k` is the seed for
    /// the first step, then per `mode` the previous step's output (`Full`)
    /// or the seed again (`SkipFromLastInput`). Returns the frames and the
    /// last step's residual outputs.
    pub fn decode_steps(
        &mut self,
        states: &[Var],
        seed: &ResidualState,
        mode: ResidualMode,
    ) -> Result<(Vec<Var>, ResidualState)> {
        let c = self.config;
        let k = c.kernel_size;
        let steps = states.len();
        let mut carried = ResidualState::default();
        let mix = |fwd: &mut Self, pre: Var, act: Var, seed: Var, prefix: &str| -> Result<Vec<Var>> {
            let w = fwd.conv(pre, prefix, ConvSpec::same(1, 1, 1))?;
            let gate = fwd.graph.sigmoid(w);
            let gates = fwd.graph.unstack_batch(gate, steps)?;
            let acts = fwd.graph.unstack_batch(act, steps)?;
            let mut out: Vec<Var> = Vec::with_capacity(steps);
            for t in 0..steps {
                let prev = match (mode, out.last()) {
                    (ResidualMode::Full, Some(&p)) => p,
                    _ => seed,
                };
                out.push(fwd.graph.gated_mix(acts[t], prev, gates[t])?);
            }
            Ok(out)
        };
        let mut x = self.graph.stack_batch(states)?;
        for (j, &cout) in c.decoder_channels.iter().enumerate() {
            let prefix = format!("dec.{j}");
            let y = self.conv_t(x, &prefix, ConvSpec::same(k, 2, cout))?;
            let pre = self.batch_norm(y, &prefix)?;
            let act = self.graph.leaky_relu(pre);
            x = match seed.layers.get(j) {
                Some(&prev) => {
                    let z = mix(self, pre, act, prev, &format!("res.{j}"))?;
                    carried.layers.push(*z.last().expect("at least one step"));
                    self.graph.stack_batch(&z)?
                }
                None => act,
            };
        }
        let pre = self.conv_t(x, "dec.out", ConvSpec::same(k, 1, c.image_channels))?;
        let out = match c.output {
            OutputNonlinearity::Sigmoid => self.graph.sigmoid(pre),
            OutputNonlinearity::Tanh => self.graph.tanh(pre),
        };
        let frames = match seed.image {
            Some(prev) => {
                let z = mix(self, pre, out, prev, "res.image")?;
                carried.image = z.last().copied();
                z
            }
            None => self.graph.unstack_batch(out, steps)?,
        };
        Ok((frames, carried))
    }

    /// Encodes the `T` input frames, then predicts `k` frames without
    /// re-encoding any prediction. Returns the predicted frame nodes.
    pub fn predict_sequence(&mut self, inputs: &[Tensor<T>], k: usize) -> Result<Vec<Var>> {
        let c = self.config;
        if inputs.len() != c.input_frames {
            return shape_err(format!(
                "model takes {} input frames, got {}",
                c.input_frames,
                inputs.len()
            ));
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let batch = inputs[0].dims()[0];
        let frames = inputs.iter().map(|f| self.frame(f)).collect::<Result<Vec<_>>>()?;
        let encoded = self.encode_frames(&frames)?;
        let mut core = self.core_init(batch);
        for enc in &encoded {
            core = self.accumulate_transform(&core, enc.d, enc.s)?;
        }
        let last_enc = encoded.last().expect("at least one input frame");
        let last_frame = *frames.last().expect("at least one input frame");
        let seed = self.residual_seed(last_enc, last_frame)?;
        let mut s = self.apply_transform(core.g(), last_enc.s)?;
        let mut states = Vec::with_capacity(k);
        let zero_d = self.graph.constant(Tensor::zeros(&[
            batch,
            c.transform_channels,
            LATENT_SIZE,
            LATENT_SIZE,
        ]));
        for step in 0..k {
            if step > 0 {
                core = self.accumulate_transform(&core, zero_d, s)?;
                s = self.apply_transform(core.g(), s)?;
            }
            states.push(s);
        }
        Ok(self.decode_steps(&states, &seed, c.residual_mode)?.0)
    }

    /// Gradients of `loss` for every parameter, in store order.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Tensor<T>>> {
        let mut grads = self.graph.backward(loss)?;
        Ok(self
            .vars
            .iter()
            .zip(self.params.iter())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.dims())))
            .collect())
    }
}
