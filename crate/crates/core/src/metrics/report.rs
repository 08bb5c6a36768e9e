use serde_json::{Map, Value};

use super::image::{psnr, ssim};
use crate::data::{BatchSpec, DataError, SequenceRecord};
use crate::model::Model;
use crate::par;
use crate::tensor::Tensor;
use crate::training::bce_loss;

/// Anything that maps T input frames to K predicted frames.
pub trait Predictor: Sync {
    fn input_frames(&self) -> usize;
    /// Native pixel range of inputs and outputs.
    fn range(&self) -> (f64, f64);
    fn predict(&self, inputs: &[Tensor<f32>], k: usize) -> crate::Result<Vec<Tensor<f32>>>;
}

impl Predictor for Model<f32> {
    fn input_frames(&self) -> usize {
        self.config.input_frames
    }

    fn range(&self) -> (f64, f64) {
        self.config.output.range()
    }

    fn predict(&self, inputs: &[Tensor<f32>], k: usize) -> crate::Result<Vec<Tensor<f32>>> {
        Model::predict(self, inputs, k)
    }
}

/// Baseline that repeats the last input frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CopyLast {
    pub input_frames: usize,
    pub range: (f64, f64),
}

impl Predictor for CopyLast {
    fn input_frames(&self) -> usize {
        self.input_frames
    }

    fn range(&self) -> (f64, f64) {
        self.range
    }

    fn predict(&self, inputs: &[Tensor<f32>], k: usize) -> crate::Result<Vec<Tensor<f32>>> {
        let last = inputs
            .last()
            .ok_or_else(|| crate::TensorError::Shape("no input frames".into()))?;
        Ok(vec![last.clone(); k])
    }
}

/// Per-horizon means plus the "average over K" and "first frame" views.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub range: (f64, f64),
    pub sequences: usize,
    /// BCE in nats/frame; only defined for [0, 1] outputs.
    pub bce: Option<Vec<f64>>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

/// Fixed-order mean: sorting first makes the sum independent of input order.
fn ordered_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

impl MetricsReport {
    pub fn horizon(&self) -> usize {
        self.psnr.len()
    }

    pub fn average(values: &[f64]) -> f64 {
        values.iter().sum::<f64>() / values.len().max(1) as f64
    }

    pub fn bce_average(&self) -> Option<f64> {
        self.bce.as_deref().map(Self::average)
    }

    pub fn bce_first(&self) -> Option<f64> {
        self.bce.as_ref().and_then(|b| b.first().copied())
    }

    /// Flat JSON object of named numbers.
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        let mut put = |k: String, v: f64| {
            m.insert(k, Value::from(v));
        };
        put("range_min".into(), self.range.0);
        put("range_max".into(), self.range.1);
        put("sequences".into(), self.sequences as f64);
        put("horizon".into(), self.horizon() as f64);
        let mut series = vec![("psnr_db", &self.psnr), ("ssim", &self.ssim)];
        if let Some(b) = &self.bce {
            series.insert(0, ("bce_nats_per_frame", b));
        }
        for (name, values) in series {
            put(format!("{name}_average"), Self::average(values));
            put(
                format!("{name}_first"),
                values.first().copied().unwrap_or(f64::NAN),
            );
            for (k, v) in values.iter().enumerate() {
                put(format!("{name}_k{:02}", k + 1), *v);
            }
        }
        Value::Object(m)
    }
}

struct SequenceMetrics {
    bce: Vec<f64>,
    psnr: Vec<f64>,
    ssim: Vec<f64>,
}

/// Runs `predictor` over every test sequence and averages per horizon.
pub fn evaluate(
    predictor: &dyn Predictor,
    records: &[SequenceRecord],
    predict_frames: usize,
    batch_size: usize,
) -> Result<MetricsReport, DataError> {
    let range = predictor.range();
    let spec = BatchSpec {
        input_frames: predictor.input_frames(),
        predict_frames,
        batch_size,
        range,
    };
    if records.is_empty() {
        return Err(DataError::Usage("test set is empty".into()));
    }
    if let Some(r) = records
        .iter()
        .find(|r| r.frames < spec.input_frames + predict_frames)
    {
        return Err(DataError::Usage(format!(
            "horizon {predict_frames} after {} inputs exceeds the {} frames per sequence",
            spec.input_frames, r.frames
        )));
    }
    let with_bce = range == (0.0, 1.0);
    let data_range = range.1 - range.0;
    let chunks: Vec<&[SequenceRecord]> = records.chunks(batch_size.max(1)).collect();
    let per_chunk = par::map_slice(&chunks, |chunk| -> Result<Vec<SequenceMetrics>, DataError> {
        let refs: Vec<&SequenceRecord> = chunk.iter().collect();
        let batch = spec.assemble(&refs)?;
        let out = predictor
            .predict(&batch.inputs, predict_frames)
            .map_err(|e| DataError::Usage(e.to_string()))?;
        let mut metrics: Vec<SequenceMetrics> = (0..chunk.len())
            .map(|_| SequenceMetrics {
                bce: Vec::new(),
                psnr: Vec::new(),
                ssim: Vec::new(),
            })
            .collect();
        for (pred, target) in out.iter().zip(&batch.targets) {
            for (i, m) in metrics.iter_mut().enumerate() {
                let p = pred.sample(i).map_err(|e| DataError::Usage(e.to_string()))?;
                let t = target.sample(i).map_err(|e| DataError::Usage(e.to_string()))?;
                let fail = |e: crate::TensorError| DataError::Usage(e.to_string());
                if with_bce {
                    m.bce.push(bce_loss(&p, &t).map_err(fail)?.nats_per_frame);
                }
                m.psnr.push(psnr(&p, &t, data_range).map_err(fail)?);
                m.ssim.push(ssim(&p, &t, data_range).map_err(fail)?);
            }
        }
        Ok(metrics)
    });
    let mut all = Vec::with_capacity(records.len());
    for chunk in per_chunk {
        all.extend(chunk?);
    }
    let column = |f: &dyn Fn(&SequenceMetrics) -> f64| ordered_mean(all.iter().map(f).collect());
    let horizons = 0..predict_frames;
    Ok(MetricsReport {
        range,
        sequences: records.len(),
        bce: with_bce.then(|| horizons.clone().map(|k| column(&|m| m.bce[k])).collect()),
        psnr: horizons.clone().map(|k| column(&|m| m.psnr[k])).collect(),
        ssim: horizons.map(|k| column(&|m| m.ssim[k])).collect(),
    })
}

/// [`evaluate`] for a model at its configured horizon.
pub fn evaluate_model(
    model: &Model<f32>,
    records: &[SequenceRecord],
    batch_size: usize,
) -> Result<MetricsReport, DataError> {
    evaluate(model, records, model.config.predict_frames, batch_size)
}
