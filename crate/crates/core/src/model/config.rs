use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Shape of the widest model and the menu of widths its sub-models use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_width: usize,
    /// Strictly increasing; the last entry equals `max_width`.
    pub width_menu: Vec<usize>,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub head_dim: usize,
    pub ffn_multiplier: usize,
    /// Dropout rate per menu width, aligned with `width_menu`.
    pub dropout: Vec<f64>,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// The WMT-scale configuration: 13 widths from 256 to 1024, 6+6 layers,
    /// dropout rising from 0 to 0.3 with width.
    pub fn wmt_big(vocab_size: usize) -> Self {
        let width_menu: Vec<usize> = (0..13).map(|i| 256 + 64 * i).collect();
        let dropout = vec![
            0.0, 0.0, 0.0, 0.1, 0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.3, 0.3, 0.3,
        ];
        ModelConfig {
            vocab_size,
            max_width: 1024,
            width_menu,
            n_encoder_layers: 6,
            n_decoder_layers: 6,
            head_dim: 64,
            ffn_multiplier: 4,
            dropout,
            max_seq_len: 256,
        }
    }

    /// Desk-scale configuration: widths {64, 128, 192, 256}, 2+2 layers.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            max_width: 256,
            width_menu: vec![64, 128, 192, 256],
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            head_dim: 64,
            ffn_multiplier: 4,
            dropout: vec![0.0; 4],
            max_seq_len: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < crate::data::NUM_RESERVED {
            return bad(format!(
                "vocab_size {} cannot hold the {} reserved tokens",
                self.vocab_size,
                crate::data::NUM_RESERVED
            ));
        }
        if self.head_dim == 0 || self.ffn_multiplier == 0 || self.max_seq_len == 0 {
            return bad("head_dim, ffn_multiplier and max_seq_len must be positive".into());
        }
        if self.n_encoder_layers == 0 || self.n_decoder_layers == 0 {
            return bad("need at least one encoder and one decoder layer".into());
        }
        if self.width_menu.is_empty() {
            return bad("width_menu is empty".into());
        }
        if self.width_menu.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("width_menu {:?} is not strictly increasing", self.width_menu));
        }
        if let Some(w) = self
            .width_menu
            .iter()
            .find(|&&w| w == 0 || w % self.head_dim != 0)
        {
            return bad(format!("width {w} is not a positive multiple of head_dim {}", self.head_dim));
        }
        if self.width_menu.last() != Some(&self.max_width) {
            return bad(format!(
                "largest menu width must equal max_width {}",
                self.max_width
            ));
        }
        if self.dropout.len() != self.width_menu.len() {
            return bad(format!(
                "{} dropout rates for {} menu widths",
                self.dropout.len(),
                self.width_menu.len()
            ));
        }
        if let Some(r) = self.dropout.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return bad(format!("dropout rate {r} outside [0, 1)"));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.n_encoder_layers + self.n_decoder_layers
    }

    pub fn menu_index(&self, width: usize) -> Option<usize> {
        self.width_menu.iter().position(|&w| w == width)
    }

    pub fn dropout_for_width(&self, width: usize) -> Option<f64> {
        self.menu_index(width).map(|i| self.dropout[i])
    }

    /// Key/value view used by the checkpoint header.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let join = |xs: Vec<String>| xs.join(",");
        vec![
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("max_width".into(), self.max_width.to_string()),
            (
                "width_menu".into(),
                join(self.width_menu.iter().map(|w| w.to_string()).collect()),
            ),
            ("n_encoder_layers".into(), self.n_encoder_layers.to_string()),
            ("n_decoder_layers".into(), self.n_decoder_layers.to_string()),
            ("head_dim".into(), self.head_dim.to_string()),
            ("ffn_multiplier".into(), self.ffn_multiplier.to_string()),
            (
                "dropout".into(),
                join(self.dropout.iter().map(|r| r.to_string()).collect()),
            ),
            ("max_seq_len".into(), self.max_seq_len.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::format("checkpoint header", format!("missing key {key}")))
        };
        let int = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|e| Error::format("checkpoint header", format!("{key}: {e}")))
        };
        let list = |key: &str| -> Result<Vec<String>> {
            Ok(get(key)?.split(',').map(str::to_string).collect())
        };
        let parse_all = |key: &str| -> Result<Vec<f64>> {
            list(key)?
                .iter()
                .map(|s| {
                    s.parse()
                        .map_err(|e| Error::format("checkpoint header", format!("{key}: {e}")))
                })
                .collect()
        };
        let known = [
            "vocab_size",
            "max_width",
            "width_menu",
            "n_encoder_layers",
            "n_decoder_layers",
            "head_dim",
            "ffn_multiplier",
            "dropout",
            "max_seq_len",
        ];
        if let Some((k, _)) = pairs.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            return Err(Error::format("checkpoint header", format!("unknown key {k}")));
        }
        let width_menu = list("width_menu")?
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|e| Error::format("checkpoint header", format!("width_menu: {e}")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let config = ModelConfig {
            vocab_size: int("vocab_size")?,
            max_width: int("max_width")?,
            width_menu,
            n_encoder_layers: int("n_encoder_layers")?,
            n_decoder_layers: int("n_decoder_layers")?,
            head_dim: int("head_dim")?,
            ffn_multiplier: int("ffn_multiplier")?,
            dropout: parse_all("dropout")?,
            max_seq_len: int("max_seq_len")?,
        };
        config.validate()?;
        Ok(config)
    }
}
