use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, SequenceRecord};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchSpec {
    pub input_frames: usize,
    pub predict_frames: usize,
    pub batch_size: usize,
    /// Pixel range the model works in, e.g. (0, 1) or (−1, 1).
    pub range: (f64, f64),
}

/// `input_frames` tensors of N×C×H×W followed by `predict_frames` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Tensor<f32>>,
    pub targets: Vec<Tensor<f32>>,
}

impl BatchSpec {
    fn check(&self, records: &[SequenceRecord]) -> Result<(), DataError> {
        let need = self.input_frames + self.predict_frames;
        if let Some(r) = records.iter().find(|r| r.frames < need) {
            return Err(DataError::Usage(format!(
                "sequences hold {} frames, {} input + {} predicted requested",
                r.frames, self.input_frames, self.predict_frames
            )));
        }
        Ok(())
    }

    /// Assembles the given sequences into one batch.
    pub fn assemble(&self, records: &[&SequenceRecord]) -> Result<Batch, DataError> {
        let Some(first) = records.first() else {
            return Err(DataError::Usage("empty batch".into()));
        };
        let (h, w, c) = (first.height, first.width, first.channels());
        if records
            .iter()
            .any(|r| (r.height, r.width, r.channels()) != (h, w, c))
        {
            return Err(DataError::Usage(
                "sequences in a batch differ in frame size".into(),
            ));
        }
        let need = self.input_frames + self.predict_frames;
        if let Some(r) = records.iter().find(|r| r.frames < need) {
            return Err(DataError::Usage(format!(
                "sequence holds {} frames, {need} needed",
                r.frames
            )));
        }
        let (lo, hi) = self.range;
        let scale = (hi - lo) / 255.0;
        let frame = |t: usize| {
            let mut data = Vec::with_capacity(records.len() * h * w * c);
            for r in records {
                // stored H×W×C, tensors are C×H×W
                let f = r.frame(t);
                for ch in 0..c {
                    data.extend((0..h * w).map(|p| (f[p * c + ch] as f64 * scale + lo) as f32));
                }
            }
            Tensor::new(&[records.len(), c, h, w], data).expect("frame buffer size")
        };
        Ok(Batch {
            inputs: (0..self.input_frames).map(frame).collect(),
            targets: (self.input_frames..need).map(frame).collect(),
        })
    }
}

/// Shuffled pass over a dataset. The last batch may be short.
pub struct Batches<'a> {
    records: &'a [SequenceRecord],
    order: Vec<usize>,
    spec: BatchSpec,
    next: usize,
}

impl Batches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.spec.batch_size).min(self.order.len());
        let picked: Vec<&SequenceRecord> = self.order[self.next..end]
            .iter()
            .map(|&i| &self.records[i])
            .collect();
        self.next = end;
        Some(self.spec.assemble(&picked).expect("records validated up front"))
    }
}

/// Batches for one epoch; the order depends only on `(seed, epoch)`.
pub fn make_batches(
    records: &[SequenceRecord],
    spec: BatchSpec,
    seed: u64,
    epoch: u64,
) -> Result<Batches<'_>, DataError> {
    if spec.batch_size == 0 || spec.batch_size > records.len() {
        return Err(DataError::Usage(format!(
            "batch size {} does not fit a dataset of {} sequences",
            spec.batch_size,
            records.len()
        )));
    }
    spec.check(records)?;
    if let Some(first) = records.first() {
        let dims = (first.height, first.width, first.channels());
        if records.iter().any(|r| (r.height, r.width, r.channels()) != dims) {
            return Err(DataError::Usage("dataset mixes frame sizes".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    Ok(Batches {
        records,
        order,
        spec,
        next: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Generator, GeneratorConfig};

    fn records(n: usize) -> Vec<SequenceRecord> {
        Generator::new(GeneratorConfig::default())
            .unwrap()
            .generate_range(0, n)
    }

    fn spec(batch_size: usize) -> BatchSpec {
        BatchSpec {
            input_frames: 10,
            predict_frames: 10,
            batch_size,
            range: (0.0, 1.0),
        }
    }

    #[test]
    fn input_and_target_frames_split_at_t() {
        let recs = records(1);
        let b = spec(1).assemble(&[&recs[0]]).unwrap();
        assert_eq!(b.inputs.len(), 10);
        assert_eq!(b.targets.len(), 10);
        let pixel = |t: &Tensor<f32>, i: usize| t.data()[i];
        for (t, frame) in b.inputs.iter().chain(&b.targets).enumerate() {
            assert_eq!(frame.dims(), &[1, 1, 64, 64]);
            let raw = recs[0].frame(t);
            for i in (0..4096).step_by(97) {
                assert_eq!(pixel(frame, i), (raw[i] as f64 / 255.0) as f32);
            }
        }
    }

    #[test]
    fn shuffle_is_seed_determined() {
        let recs = records(12);
        let a = make_batches(&recs, spec(5), 3, 0).unwrap();
        let b = make_batches(&recs, spec(5), 3, 0).unwrap();
        let c = make_batches(&recs, spec(5), 3, 1).unwrap();
        assert_eq!(a.order(), b.order());
        assert_ne!(a.order(), c.order());
        let sizes: Vec<usize> = a.map(|b| b.inputs[0].dims()[0]).collect();
        assert_eq!(sizes, [5, 5, 2]);
    }

    #[test]
    fn pixels_lie_in_declared_range() {
        let recs = records(4);
        for range in [(0.0, 1.0), (-1.0, 1.0)] {
            let s = BatchSpec { range, ..spec(2) };
            for b in make_batches(&recs, s, 0, 0).unwrap() {
                for t in b.inputs.iter().chain(&b.targets) {
                    assert!(t
                        .data()
                        .iter()
                        .all(|&v| v as f64 >= range.0 && v as f64 <= range.1));
                }
            }
        }
    }

    #[test]
    fn oversized_batch_and_short_sequences_are_usage_errors() {
        let recs = records(3);
        assert!(matches!(
            make_batches(&recs, spec(4), 0, 0),
            Err(DataError::Usage(_))
        ));
        let long = BatchSpec {
            predict_frames: 11,
            ..spec(2)
        };
        assert!(matches!(
            make_batches(&recs, long, 0, 0),
            Err(DataError::Usage(_))
        ));
    }
}
