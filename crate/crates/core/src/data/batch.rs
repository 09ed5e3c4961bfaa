use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::lattice::ObjectKind;

/// A group of samples padded to a common length.
///
/// `token_mask[b][i]` is true for real tokens of sample `b`; `cell_mask`
/// does the same over lattice cells (`[CLS]`, words, `[SEP]`, objects).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub samples: Vec<Sample>,
    pub token_mask: Vec<Vec<bool>>,
    pub cell_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn max_tokens(&self) -> usize {
        self.token_mask.first().map_or(0, Vec::len)
    }

    pub fn max_cells(&self) -> usize {
        self.cell_mask.first().map_or(0, Vec::len)
    }
}

/// Cuts a sample to its first `max_len` tokens. Phrase objects are clipped
/// to the kept range and dropped when they start beyond it. Returns the
/// sample unchanged when it already fits.
pub fn truncate(sample: &Sample, max_len: usize) -> Sample {
    if sample.len() <= max_len {
        return sample.clone();
    }
    let mut out = sample.clone();
    out.tokens.truncate(max_len);
    out.tags.truncate(max_len);
    out.objects.retain_mut(|o| match (o.kind, o.span.as_mut()) {
        (ObjectKind::NounPhrase, Some(span)) => {
            span[1] = span[1].min(max_len);
            span[0] <= max_len
        }
        _ => true,
    });
    out
}

/// Splits `samples` into padded batches of at most `batch_size`.
///
/// With `shuffle_seed` the sample order is permuted first; the same seed
/// always gives the same batches. Samples longer than `max_len` are
/// truncated with a warning.
pub fn make_batches(
    samples: &[Sample],
    max_len: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if max_len == 0 || batch_size == 0 {
        return Err(Error::Config(format!(
            "max_len and batch_size must be positive, got {max_len} and {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut truncated = 0;
    let batches = order
        .chunks(batch_size)
        .map(|chunk| {
            let picked: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    if samples[i].len() > max_len {
                        truncated += 1;
                    }
                    truncate(&samples[i], max_len)
                })
                .collect();
            let max_t = picked.iter().map(Sample::len).max().unwrap_or(0);
            let cells = |s: &Sample| s.len() + 2 + s.objects.len();
            let max_c = picked.iter().map(cells).max().unwrap_or(0);
            let token_mask = picked.iter().map(|s| mask(s.len(), max_t)).collect();
            let cell_mask = picked.iter().map(|s| mask(cells(s), max_c)).collect();
            Batch {
                indices: chunk.to_vec(),
                samples: picked,
                token_mask,
                cell_mask,
            }
        })
        .collect();
    if truncated > 0 {
        log::warn!("{truncated} sample(s) longer than {max_len} tokens were truncated");
    }
    Ok(batches)
}

fn mask(len: usize, padded: usize) -> Vec<bool> {
    (0..padded).map(|i| i < len).collect()
}
