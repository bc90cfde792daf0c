use rand::Rng;

use super::{ModelConfig, WidthSpec};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIds {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormIds {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionIds {
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderLayerIds {
    pub self_attn: AttentionIds,
    pub norm1: NormIds,
    pub ffn1: LinearIds,
    pub ffn2: LinearIds,
    pub norm2: NormIds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderLayerIds {
    pub self_attn: AttentionIds,
    pub norm1: NormIds,
    pub cross_attn: AttentionIds,
    pub norm2: NormIds,
    pub ffn1: LinearIds,
    pub ffn2: LinearIds,
    pub norm3: NormIds,
}

/// Indices of every named parameter in [`ParameterStore::params`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub embedding: usize,
    pub input_proj: LinearIds,
    pub output_proj: LinearIds,
    pub encoder: Vec<EncoderLayerIds>,
    pub decoder: Vec<DecoderLayerIds>,
}

/// The top-left `rows x cols` block of parameter `param` (`rows == 1` for
/// vectors).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Region {
    pub param: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Region {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

enum Init {
    Uniform,
    Zeros,
    Ones,
}

struct Builder {
    params: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.params.push((name, shape, init));
        self.params.len() - 1
    }

    fn linear(&mut self, prefix: &str, rows: usize, cols: usize, bias: usize) -> LinearIds {
        LinearIds {
            weight: self.add(format!("{prefix}.weight"), vec![rows, cols], Init::Uniform),
            bias: self.add(format!("{prefix}.bias"), vec![bias], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, width: usize) -> NormIds {
        NormIds {
            gain: self.add(format!("{prefix}.gain"), vec![width], Init::Ones),
            bias: self.add(format!("{prefix}.bias"), vec![width], Init::Zeros),
        }
    }

    fn attention(&mut self, prefix: &str, m: usize) -> AttentionIds {
        AttentionIds {
            q: self.linear(&format!("{prefix}.q"), m, m, m),
            k: self.linear(&format!("{prefix}.k"), m, m, m),
            v: self.linear(&format!("{prefix}.v"), m, m, m),
            o: self.linear(&format!("{prefix}.o"), m, m, m),
        }
    }
}

fn build_layout(config: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let m = config.max_width;
    let f = config.ffn_multiplier * m;
    let mut b = Builder { params: Vec::new() };
    let embedding = b.add("embedding".into(), vec![config.vocab_size, m], Init::Uniform);
    let input_proj = b.linear("input_proj", m, m, m);
    let output_proj = b.linear("output_proj", m, m, m);
    let encoder = (0..config.n_encoder_layers)
        .map(|i| {
            let p = format!("encoder.{i}");
            EncoderLayerIds {
                self_attn: b.attention(&format!("{p}.self_attn"), m),
                norm1: b.norm(&format!("{p}.norm1"), m),
                ffn1: b.linear(&format!("{p}.ffn.fc1"), m, f, f),
                ffn2: b.linear(&format!("{p}.ffn.fc2"), f, m, m),
                norm2: b.norm(&format!("{p}.norm2"), m),
            }
        })
        .collect();
    let decoder = (0..config.n_decoder_layers)
        .map(|i| {
            let p = format!("decoder.{i}");
            DecoderLayerIds {
                self_attn: b.attention(&format!("{p}.self_attn"), m),
                norm1: b.norm(&format!("{p}.norm1"), m),
                cross_attn: b.attention(&format!("{p}.cross_attn"), m),
                norm2: b.norm(&format!("{p}.norm2"), m),
                ffn1: b.linear(&format!("{p}.ffn.fc1"), m, f, f),
                ffn2: b.linear(&format!("{p}.ffn.fc2"), f, m, m),
                norm3: b.norm(&format!("{p}.norm3"), m),
            }
        })
        .collect();
    (
        Layout {
            embedding,
            input_proj,
            output_proj,
            encoder,
            decoder,
        },
        b.params,
    )
}

/// Every weight of the widest Transformer. Sub-models never own storage;
/// they read top-left crops of these tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    config: ModelConfig,
    layout: Layout,
    params: Vec<Parameter>,
}

impl ParameterStore {
    /// Matrices (including the embedding) start uniform in
    /// `(-1/sqrt(max_width), 1/sqrt(max_width))`; biases start at zero and
    /// layer-norm gains at one.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let bound = 1.0 / (config.max_width as f64).sqrt();
        let (layout, specs) = build_layout(&config);
        let params = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Uniform => (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                Ok(Parameter {
                    name,
                    value: Tensor::new(shape, data)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ParameterStore {
            config,
            layout,
            params,
        })
    }

    /// All-zero store with the layout of `config`.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let params = specs
            .into_iter()
            .map(|(name, shape, _)| {
                Ok(Parameter {
                    name,
                    value: Tensor::zeros(shape)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ParameterStore {
            config,
            layout,
            params,
        })
    }

    /// Rebuilds a store from named tensors, checking names and shapes
    /// against the layout of `config`.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut store = ParameterStore::zeros(config)?;
        if named.len() != store.params.len() {
            return Err(Error::format(
                "parameter set",
                format!("expected {} tensors, got {}", store.params.len(), named.len()),
            ));
        }
        for (param, (name, value)) in store.params.iter_mut().zip(named) {
            if param.name != name || param.value.shape() != value.shape() {
                return Err(Error::format(
                    "parameter set",
                    format!(
                        "expected {} {:?}, got {name} {:?}",
                        param.name,
                        param.value.shape(),
                        value.shape()
                    ),
                ));
            }
            param.value = value;
        }
        Ok(store)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.params[id].value
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn set(&mut self, id: usize, value: Tensor) -> Result<()> {
        let current = &self.params[id].value;
        if current.shape() != value.shape() {
            return Err(Error::shape(format!(
                "{} is {:?}, got {:?}",
                self.params[id].name,
                current.shape(),
                value.shape()
            )));
        }
        self.params[id].value = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// The blocks of the store a sub-model with `spec` reads.
    pub fn active_regions(&self, spec: &WidthSpec) -> Result<Vec<Region>> {
        spec.validate(&self.config)?;
        let cfg = &self.config;
        let (m, c, mult) = (cfg.max_width, spec.io_width, cfg.ffn_multiplier);
        let l = &self.layout;
        let mut out = Vec::new();
        let mut push = |param: usize, rows: usize, cols: usize| out.push(Region { param, rows, cols });
        let linear = |push: &mut dyn FnMut(usize, usize, usize), ids: LinearIds, r, k, bias| {
            push(ids.weight, r, k);
            push(ids.bias, 1, bias);
        };
        push(l.embedding, cfg.vocab_size, m);
        linear(&mut push, l.input_proj, m, c, c);
        linear(&mut push, l.output_proj, c, m, m);
        let attention = |push: &mut dyn FnMut(usize, usize, usize), a: AttentionIds, d: usize| {
            for ids in [a.q, a.k, a.v] {
                push(ids.weight, c, d);
                push(ids.bias, 1, d);
            }
            push(a.o.weight, d, c);
            push(a.o.bias, 1, c);
        };
        let norm = |push: &mut dyn FnMut(usize, usize, usize), n: NormIds| {
            push(n.gain, 1, c);
            push(n.bias, 1, c);
        };
        let ffn = |push: &mut dyn FnMut(usize, usize, usize), f1: LinearIds, f2: LinearIds, d: usize| {
            push(f1.weight, c, mult * d);
            push(f1.bias, 1, mult * d);
            push(f2.weight, mult * d, c);
            push(f2.bias, 1, c);
        };
        for (layer, &d) in l.encoder.iter().zip(spec.encoder_widths(cfg)) {
            attention(&mut push, layer.self_attn, d);
            norm(&mut push, layer.norm1);
            ffn(&mut push, layer.ffn1, layer.ffn2, d);
            norm(&mut push, layer.norm2);
        }
        for (layer, &d) in l.decoder.iter().zip(spec.decoder_widths(cfg)) {
            attention(&mut push, layer.self_attn, d);
            norm(&mut push, layer.norm1);
            attention(&mut push, layer.cross_attn, d);
            norm(&mut push, layer.norm2);
            ffn(&mut push, layer.ffn1, layer.ffn2, d);
            norm(&mut push, layer.norm3);
        }
        Ok(out)
    }

    /// Per-element flags: true where some region in `regions` covers the
    /// element. Indexed like [`ParameterStore::params`].
    pub fn coverage(&self, regions: &[Region]) -> Vec<Vec<bool>> {
        let mut masks: Vec<Vec<bool>> = self.params.iter().map(|p| vec![false; p.value.len()]).collect();
        for r in regions {
            let (_, cols) = self.params[r.param].value.as_matrix_dims();
            for row in 0..r.rows {
                for col in 0..r.cols {
                    masks[r.param][row * cols + col] = true;
                }
            }
        }
        masks
    }
}
