//! The prediction network: factorizing encoder, transformation-accumulating
//! recurrent core, decoder and weighted temporal residual connections.

mod config;
mod network;
mod params;

pub use config::{
    Ablation, ConfigError, CoreMode, ModelConfig, OutputNonlinearity, ResidualMode, LATENT_SIZE,
};
pub use network::{convlstm_step, CoreState, Encoded, Forward, ResidualState};
pub use params::{Census, Param, ParamGroup, ParamStore, StatsStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::ops::RunningStats;
use crate::tensor::{Element, Tensor};
use params::Init;

/// Configuration, parameters and batch-norm statistics of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Element = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub stats: StatsStore<T>,
}

struct Builder<'a, T: Element> {
    params: ParamStore<T>,
    stats: StatsStore<T>,
    init: Init<'a, ChaCha8Rng>,
}

impl<T: Element> Builder<'_, T> {
    fn add(&mut self, name: String, value: Tensor<T>, group: ParamGroup, decay: bool) {
        self.params.push(Param {
            name,
            value,
            group,
            decay,
        });
    }

    /// Conv kernel F×C×k×k plus bias.
    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, group: ParamGroup, decay: bool) {
        let w = self.init.kernel(&[cout, cin, k, k], cin * k * k);
        self.add(format!("{prefix}.w"), w, group, decay);
        self.add(format!("{prefix}.b"), Tensor::zeros(&[cout]), group, false);
    }

    /// Transposed kernel Cin×Cout×k×k plus bias.
    fn conv_t(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, group: ParamGroup) {
        let w = self.init.kernel(&[cin, cout, k, k], cin * k * k);
        self.add(format!("{prefix}.w"), w, group, true);
        self.add(format!("{prefix}.b"), Tensor::zeros(&[cout]), group, false);
    }

    fn bn(&mut self, prefix: &str, channels: usize, group: ParamGroup) {
        self.add(
            format!("{prefix}.gamma"),
            Tensor::full(&[channels], T::one()),
            group,
            false,
        );
        self.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]), group, false);
        self.stats
            .entries
            .push((prefix.to_string(), RunningStats::new(channels)));
    }
}

impl<T: Element> Model<T> {
    /// Allocates and initializes every parameter for `config`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamStore::new(),
            stats: StatsStore::default(),
            init: Init { rng: &mut rng },
        };
        let c = &config;
        let k = c.kernel_size;

        let mut cin = c.image_channels;
        for (i, &cout) in c.encoder_channels.iter().enumerate() {
            let prefix = format!("enc.{i}");
            b.conv(&prefix, cin, cout, k, ParamGroup::Encoder, true);
            if i > 0 {
                b.bn(&prefix, cout, ParamGroup::Encoder);
            }
            cin = cout;
        }
        let latent = c.state_channels + c.transform_channels;
        b.conv("enc.latent", cin, latent, k, ParamGroup::Encoder, true);
        b.bn("enc.latent", latent, ParamGroup::Encoder);

        let mut lin = latent;
        for l in 0..c.lstm_layers {
            let h = c.lstm_hidden;
            let kk = c.lstm_kernel;
            let fan = (lin + h) * kk * kk;
            let w = b.init.kernel(&[4 * h, lin + h, kk, kk], fan);
            b.add(format!("lstm.{l}.w"), w, ParamGroup::ConvLstm, false);
            // gate order: input, forget, output, candidate
            let mut bias = Tensor::zeros(&[4 * h]);
            bias.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = T::one());
            b.add(format!("lstm.{l}.b"), bias, ParamGroup::ConvLstm, false);
            lin = h;
        }

        if c.core_mode == CoreMode::Transformational {
            let mut pin = c.lstm_hidden + c.state_channels;
            for i in 0..c.phi_layers {
                let pout = if i + 1 == c.phi_layers {
                    c.state_channels
                } else {
                    c.phi_channels
                };
                b.conv(
                    &format!("phi.{i}"),
                    pin,
                    pout,
                    c.phi_kernel,
                    ParamGroup::Operator,
                    false,
                );
                pin = pout;
            }
        }

        let mut din = c.state_channels;
        for (j, &cout) in c.decoder_channels.iter().enumerate() {
            let prefix = format!("dec.{j}");
            b.conv_t(&prefix, din, cout, k, ParamGroup::Decoder);
            b.bn(&prefix, cout, ParamGroup::Decoder);
            din = cout;
        }
        b.conv_t("dec.out", din, c.image_channels, k, ParamGroup::Decoder);

        if c.has_residuals() {
            for (j, &cout) in c.decoder_channels.iter().enumerate() {
                b.conv(
                    &format!("res.{j}"),
                    cout,
                    1,
                    1,
                    ParamGroup::ResidualWeights,
                    false,
                );
                let src = c.residual_source_channels(j);
                if src != cout {
                    b.conv(
                        &format!("res.{j}.proj"),
                        src,
                        cout,
                        1,
                        ParamGroup::ResidualProjections,
                        false,
                    );
                }
            }
            if c.image_residual {
                b.conv(
                    "res.image",
                    c.image_channels,
                    1,
                    1,
                    ParamGroup::ImageResidual,
                    false,
                );
            }
        }

        let Builder { params, stats, .. } = b;
        Ok(Self {
            config,
            params,
            stats,
        })
    }

    pub fn census(&self) -> Census {
        Census::of(&self.params)
    }

    /// Forward context that updates batch-norm running statistics and
    /// applies dropout. `seed` drives the dropout masks.
    pub fn train_forward(&mut self, seed: u64) -> Forward<'_, T> {
        Forward::new_train(&self.config, &self.params, &mut self.stats, seed)
    }

    /// Forward context using running statistics and no dropout.
    pub fn eval_forward(&self) -> Forward<'_, T> {
        Forward::new_eval(&self.config, &self.params, &self.stats)
    }

    /// Re-estimates every batch-norm running statistic as the plain average
    /// of its batch statistics over `batches` (each a list of T input
    /// frames), with weights frozen and dropout off.
    pub fn refit_batch_norm(&mut self, batches: &[Vec<Tensor<T>>]) -> crate::Result<()> {
        for (i, inputs) in batches.iter().enumerate() {
            let momentum = i as f64 / (i + 1) as f64;
            let mut fwd = Forward::new_refit(&self.config, &self.params, &mut self.stats, momentum);
            fwd.predict_sequence(inputs, self.config.predict_frames)?;
        }
        Ok(())
    }

    /// Same network in another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params.push(Param {
                name: p.name.clone(),
                value: p.value.cast(),
                group: p.group,
                decay: p.decay,
            });
        }
        let stats = StatsStore {
            entries: self
                .stats
                .entries
                .iter()
                .map(|(n, s)| {
                    (
                        n.clone(),
                        RunningStats {
                            mean: s.mean.cast(),
                            var: s.var.cast(),
                        },
                    )
                })
                .collect(),
        };
        Model {
            config: self.config.clone(),
            params,
            stats,
        }
    }

    /// Eval-mode rollout of a batch: `inputs` holds T frames of N×C×H×W,
    /// the result holds `k` predicted frames.
    pub fn predict(&self, inputs: &[Tensor<T>], k: usize) -> crate::Result<Vec<Tensor<T>>> {
        let mut fwd = self.eval_forward();
        let out = fwd.predict_sequence(inputs, k)?;
        Ok(out.into_iter().map(|v| fwd.graph.value(v).clone()).collect())
    }
}
