use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid model config: {0}")]
pub struct ConfigError(pub String);

/// Where the weighted residual connections draw their carried activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Encoder at the last input step seeds the first prediction; later steps
    /// carry the previous decoder step.
    Full,
    /// Every prediction step mixes with the encoder activations at the last
    /// input step.
    SkipFromLastInput,
    /// No residual or skip connections.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreMode {
    /// ConvLSTM accumulates the transformation; the operator applies it.
    Transformational,
    /// The top ConvLSTM output is used directly as the next state.
    ConvlstmOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputNonlinearity {
    Sigmoid,
    Tanh,
}

impl OutputNonlinearity {
    /// Pixel value range of frames produced under this nonlinearity.
    pub fn range(self) -> (f64, f64) {
        match self {
            Self::Sigmoid => (0.0, 1.0),
            Self::Tanh => (-1.0, 1.0),
        }
    }
}

/// Named architecture variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    None,
    /// Recurrent core without the operator: ConvLSTM only.
    NoCore,
    /// Residuals drawn from the last input step at every prediction step.
    SkipLastInput,
    /// No residual connections of any kind.
    NoResidual,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::None,
        Ablation::NoCore,
        Ablation::SkipLastInput,
        Ablation::NoResidual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoCore => "no-core",
            Ablation::SkipLastInput => "skip-last-input",
            Ablation::NoResidual => "no-residual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Frame height and width in pixels.
    pub input_size: usize,
    pub image_channels: usize,
    pub input_frames: usize,
    pub predict_frames: usize,
    /// Filters of the stride-2 encoder layers, first to last.
    pub encoder_channels: Vec<usize>,
    /// Filters of the stride-2 transposed decoder layers, first to last.
    pub decoder_channels: Vec<usize>,
    /// Channels of the state latent `s`.
    pub state_channels: usize,
    /// Channels of the transformational latent `d`.
    pub transform_channels: usize,
    pub kernel_size: usize,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub lstm_kernel: usize,
    pub phi_layers: usize,
    pub phi_channels: usize,
    pub phi_kernel: usize,
    pub residual_mode: ResidualMode,
    pub core_mode: CoreMode,
    pub image_residual: bool,
    pub output: OutputNonlinearity,
    /// Dropout rate on hidden encoder layers during training.
    pub encoder_dropout: f64,
}

/// Spatial extent of the latent maps.
pub const LATENT_SIZE: usize = 4;

impl ModelConfig {
    /// Full-width Moving MNIST network.
    pub fn mnist_paper() -> Self {
        Self {
            input_size: 64,
            image_channels: 1,
            input_frames: 10,
            predict_frames: 10,
            encoder_channels: vec![64, 64, 96, 96],
            decoder_channels: vec![96, 96, 64, 64],
            state_channels: 64,
            transform_channels: 64,
            kernel_size: 4,
            lstm_layers: 3,
            lstm_hidden: 64,
            lstm_kernel: 3,
            phi_layers: 3,
            phi_channels: 64,
            phi_kernel: 4,
            residual_mode: ResidualMode::Full,
            core_mode: CoreMode::Transformational,
            image_residual: false,
            output: OutputNonlinearity::Sigmoid,
            encoder_dropout: 0.0,
        }
    }

    /// Moving MNIST wiring at desk scale: channel schedule (16,16,24,24,32).
    pub fn desk() -> Self {
        Self {
            encoder_channels: vec![16, 16, 24, 24],
            decoder_channels: vec![24, 24, 16, 16],
            state_channels: 16,
            transform_channels: 16,
            lstm_hidden: 16,
            phi_channels: 16,
            ..Self::mnist_paper()
        }
    }

    pub fn kth_paper() -> Self {
        Self {
            input_size: 128,
            image_channels: 1,
            input_frames: 10,
            predict_frames: 10,
            encoder_channels: vec![64, 128, 256, 512, 512],
            decoder_channels: vec![512, 512, 256, 128, 64],
            state_channels: 128,
            transform_channels: 128,
            kernel_size: 4,
            lstm_layers: 3,
            lstm_hidden: 128,
            lstm_kernel: 3,
            phi_layers: 3,
            phi_channels: 128,
            phi_kernel: 4,
            residual_mode: ResidualMode::Full,
            core_mode: CoreMode::Transformational,
            image_residual: true,
            output: OutputNonlinearity::Tanh,
            encoder_dropout: 0.5,
        }
    }

    pub fn ucf_paper() -> Self {
        Self {
            input_size: 256,
            image_channels: 1,
            input_frames: 2,
            predict_frames: 1,
            encoder_channels: vec![64, 128, 256, 256, 512, 512],
            decoder_channels: vec![512, 512, 256, 256, 128, 64],
            state_channels: 256,
            transform_channels: 256,
            kernel_size: 4,
            lstm_layers: 3,
            lstm_hidden: 256,
            lstm_kernel: 3,
            phi_layers: 3,
            phi_channels: 256,
            phi_kernel: 3,
            residual_mode: ResidualMode::Full,
            core_mode: CoreMode::Transformational,
            image_residual: true,
            output: OutputNonlinearity::Tanh,
            encoder_dropout: 0.5,
        }
    }

    /// Smallest complete network: 8×8 frames, every width at most 8, T=3, K=2.
    /// Used for finite-difference gradient checks.
    pub fn miniature() -> Self {
        Self {
            input_size: 8,
            image_channels: 1,
            input_frames: 3,
            predict_frames: 2,
            encoder_channels: vec![4],
            decoder_channels: vec![3],
            state_channels: 4,
            transform_channels: 4,
            kernel_size: 4,
            lstm_layers: 3,
            lstm_hidden: 4,
            lstm_kernel: 3,
            phi_layers: 3,
            phi_channels: 5,
            phi_kernel: 4,
            residual_mode: ResidualMode::Full,
            core_mode: CoreMode::Transformational,
            image_residual: true,
            output: OutputNonlinearity::Sigmoid,
            encoder_dropout: 0.0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "mnist-paper" => Some(Self::mnist_paper()),
            "kth-paper" => Some(Self::kth_paper()),
            "ucf-paper" => Some(Self::ucf_paper()),
            "miniature" => Some(Self::miniature()),
            _ => None,
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        match ablation {
            Ablation::None => {}
            Ablation::NoCore => self.core_mode = CoreMode::ConvlstmOnly,
            Ablation::SkipLastInput => self.residual_mode = ResidualMode::SkipFromLastInput,
            Ablation::NoResidual => self.residual_mode = ResidualMode::None,
        }
        self
    }

    pub fn has_residuals(&self) -> bool {
        self.residual_mode != ResidualMode::None
    }

    pub fn has_image_residual(&self) -> bool {
        self.has_residuals() && self.image_residual
    }

    /// Spatial extent after stride-2 encoder layer `i`.
    pub fn encoder_extent(&self, i: usize) -> usize {
        self.input_size >> (i + 1)
    }

    /// Spatial extent after stride-2 decoder layer `j`.
    pub fn decoder_extent(&self, j: usize) -> usize {
        LATENT_SIZE << (j + 1)
    }

    /// Encoder activation that seeds the residual of decoder layer `j`:
    /// `Some(i)` for encoder layer `i`, `None` for the input frame itself.
    pub fn residual_source(&self, j: usize) -> Option<usize> {
        let target = self.decoder_extent(j);
        (0..self.encoder_channels.len()).find(|&i| self.encoder_extent(i) == target)
    }

    /// Channels of the residual seed for decoder layer `j`.
    pub fn residual_source_channels(&self, j: usize) -> usize {
        match self.residual_source(j) {
            Some(i) => self.encoder_channels[i],
            None => self.image_channels,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        let layers = self.encoder_channels.len();
        if layers == 0 {
            return err("encoder needs at least one stride-2 layer".into());
        }
        if self.input_size != LATENT_SIZE << layers {
            return err(format!(
                "{} stride-2 layers map {}px frames to {}px, latent must be {}px",
                layers,
                self.input_size,
                self.input_size >> layers,
                LATENT_SIZE
            ));
        }
        if self.decoder_channels.len() != layers {
            return err(format!(
                "decoder has {} upsampling layers, encoder has {}",
                self.decoder_channels.len(),
                layers
            ));
        }
        if self.state_channels == 0 || self.state_channels != self.transform_channels {
            return err(format!(
                "state and transformational latents must have equal nonzero width (got {} and {})",
                self.state_channels, self.transform_channels
            ));
        }
        if self.image_channels == 0
            || self.encoder_channels.contains(&0)
            || self.decoder_channels.contains(&0)
        {
            return err("channel counts must be positive".into());
        }
        if self.lstm_layers == 0 || self.lstm_hidden == 0 {
            return err("ConvLSTM stack needs at least one layer with positive width".into());
        }
        if self.core_mode == CoreMode::Transformational && (self.phi_layers == 0 || self.phi_channels == 0) {
            return err("operator needs at least one layer with positive width".into());
        }
        if self.core_mode == CoreMode::ConvlstmOnly && self.lstm_hidden != self.state_channels {
            return err(format!(
                "ConvLSTM-only core emits the next state directly, so hidden width {} must equal state width {}",
                self.lstm_hidden, self.state_channels
            ));
        }
        if [self.kernel_size, self.lstm_kernel, self.phi_kernel].contains(&0) {
            return err("kernel sizes must be positive".into());
        }
        if self.input_frames == 0 {
            return err("need at least one input frame".into());
        }
        if !(0.0..1.0).contains(&self.encoder_dropout) {
            return err(format!("dropout rate {} outside [0, 1)", self.encoder_dropout));
        }
        Ok(())
    }
}
