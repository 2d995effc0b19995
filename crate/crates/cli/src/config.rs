use std::path::Path;

use frametwin::field::{Architecture, EncodingConfig};
use frametwin::optimize::{AdamConfig, LossWeights, TwinConfig};
use frametwin::splat::RenderConfig;
use frametwin::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Every tunable of a run. Read from TOML; missing keys take the defaults
/// below, unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub degree: usize,
    pub kernels_per_edge: usize,
    pub samples_per_edge: usize,
    pub encoding_bands: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub skip_layer: usize,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub w_bend: f64,
    pub p: f64,
    pub lr0: f64,
    pub lr_min: f64,
    pub decay: f64,
    pub lr_tau: f64,
    pub lr_alpha: f64,
    pub max_iters: usize,
    pub window: usize,
    pub rel_tol: f64,
    pub bend_samples: usize,
    /// Finite-difference step in mm; 1% of the model's bounding-box
    /// diagonal when absent.
    pub fd_step: Option<f64>,
    pub tau_init: f64,
    pub alpha_init: f64,
    pub noise: bool,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        let twin = TwinConfig::default();
        let weights = LossWeights::default();
        Self {
            degree: 3,
            kernels_per_edge: twin.kernels_per_edge,
            samples_per_edge: twin.samples_per_edge,
            encoding_bands: twin.architecture.encoding.num_bands,
            hidden_layers: twin.architecture.hidden_layers,
            hidden_width: twin.architecture.hidden_width,
            skip_layer: twin.architecture.skip_layer,
            views: 8,
            width: 256,
            height: 256,
            w_bend: weights.w_bend,
            p: weights.p_exponent,
            lr0: twin.adam.lr0,
            lr_min: twin.adam.lr_min,
            decay: twin.adam.decay,
            lr_tau: twin.lr_tau,
            lr_alpha: twin.lr_alpha,
            max_iters: twin.max_iters,
            window: twin.window,
            rel_tol: twin.rel_tol,
            bend_samples: weights.bend_samples,
            fd_step: weights.fd_step,
            tau_init: twin.tau_init,
            alpha_init: twin.alpha_init,
            noise: false,
            seed: 0,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", p.display())))?
            }
        };
        Ok(cfg)
    }

    pub fn twin(&self) -> TwinConfig {
        TwinConfig {
            max_iters: self.max_iters,
            window: self.window,
            rel_tol: self.rel_tol,
            seed: self.seed,
            kernels_per_edge: self.kernels_per_edge,
            samples_per_edge: self.samples_per_edge,
            tau_init: self.tau_init,
            alpha_init: self.alpha_init,
            lr_tau: self.lr_tau,
            lr_alpha: self.lr_alpha,
            adam: AdamConfig {
                lr0: self.lr0,
                lr_min: self.lr_min,
                decay: self.decay,
                ..AdamConfig::default()
            },
            architecture: Architecture {
                encoding: EncodingConfig {
                    num_bands: self.encoding_bands,
                    ..EncodingConfig::default()
                },
                hidden_layers: self.hidden_layers,
                hidden_width: self.hidden_width,
                skip_layer: self.skip_layer,
            },
            render: RenderConfig::default(),
            ..TwinConfig::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            w_bend: self.w_bend,
            p_exponent: self.p,
            fd_step: self.fd_step,
            bend_samples: self.bend_samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Validation(format!("config: {msg}")));
        if self.degree == 0 {
            return bad("degree must be at least 1");
        }
        if self.views == 0 {
            return bad("views must be at least 1");
        }
        if self.width == 0 || self.height == 0 {
            return bad("width and height must be positive");
        }
        self.twin().validate().map_err(|e| Error::Validation(format!("config: {e}")))?;
        self.weights().validate().map_err(|e| Error::Validation(format!("config: {e}")))?;
        Ok(())
    }
}

/// Hex SHA-256 of a canonical JSON rendering of `value`.
pub fn hash_of<T: Serialize>(value: &T) -> Result<String> {
    let text = frametwin::io::to_json(value)?;
    Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}
