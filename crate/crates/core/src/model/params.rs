use std::collections::HashMap;

use rand::Rng;
use serde::Serialize;

use crate::tensor::ops::RunningStats;
use crate::tensor::{Element, Tensor};

/// Component a parameter belongs to, for census and weight-decay purposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    ConvLstm,
    Operator,
    ResidualWeights,
    ResidualProjections,
    ImageResidual,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Encoder,
        ParamGroup::Decoder,
        ParamGroup::ConvLstm,
        ParamGroup::Operator,
        ParamGroup::ResidualWeights,
        ParamGroup::ResidualProjections,
        ParamGroup::ImageResidual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Decoder => "decoder",
            ParamGroup::ConvLstm => "convlstm",
            ParamGroup::Operator => "operator",
            ParamGroup::ResidualWeights => "residual_weights",
            ParamGroup::ResidualProjections => "residual_projections",
            ParamGroup::ImageResidual => "image_residual",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
    /// Whether weight decay applies (encoder/decoder kernels only).
    pub decay: bool,
}

/// Ordered, name-indexed parameter set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Element> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, param: Param<T>) -> usize {
        let i = self.params.len();
        assert!(
            self.index.insert(param.name.clone(), i).is_none(),
            "duplicate parameter {}",
            param.name
        );
        self.params.push(param);
        i
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn at(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn count_group(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Named running statistics of every batch-norm layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StatsStore<T: Element> {
    pub entries: Vec<(String, RunningStats<T>)>,
}

impl<T: Element> StatsStore<T> {
    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }
}

/// Exact parameter counts per component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Census {
    pub encoder: usize,
    pub decoder: usize,
    pub convlstm: usize,
    pub operator: usize,
    pub residual_weights: usize,
    pub residual_projections: usize,
    pub image_residual: usize,
    /// Weight-map parameter count of each residual-equipped decoder layer,
    /// image level last when present.
    pub weight_map_per_layer: Vec<usize>,
    pub total: usize,
}

impl Census {
    pub fn of<T: Element>(store: &ParamStore<T>) -> Self {
        let mut per_layer: Vec<(String, usize)> = Vec::new();
        for p in store.iter() {
            if matches!(p.group, ParamGroup::ResidualWeights | ParamGroup::ImageResidual) {
                let layer = p.name.rsplit_once('.').map(|(l, _)| l).unwrap_or(&p.name);
                match per_layer.iter_mut().find(|(n, _)| n == layer) {
                    Some((_, c)) => *c += p.value.len(),
                    None => per_layer.push((layer.to_string(), p.value.len())),
                }
            }
        }
        Self {
            encoder: store.count_group(ParamGroup::Encoder),
            decoder: store.count_group(ParamGroup::Decoder),
            convlstm: store.count_group(ParamGroup::ConvLstm),
            operator: store.count_group(ParamGroup::Operator),
            residual_weights: store.count_group(ParamGroup::ResidualWeights),
            residual_projections: store.count_group(ParamGroup::ResidualProjections),
            image_residual: store.count_group(ParamGroup::ImageResidual),
            weight_map_per_layer: per_layer.into_iter().map(|(_, c)| c).collect(),
            total: store.count(),
        }
    }
}

/// Parameter initializer: uniform(−b, b) kernels with b = sqrt(1/fan_in).
pub(crate) struct Init<'a, R: Rng> {
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn kernel<T: Element>(&mut self, dims: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = (1.0 / fan_in as f64).sqrt();
        Tensor::from_fn(dims, |_| T::from_f64(self.rng.random_range(-bound..bound)))
    }
}
