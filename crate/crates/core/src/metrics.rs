use crate::error::{Error, Result};

/// Levenshtein distance with unit costs, O(min(m, n)) memory.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut cur = vec![0; short.len() + 1];
    for (i, x) in long.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in short.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

/// Character error rate: edit distance over reference length. May exceed 1.
pub fn cer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyInput("CER needs a non-empty reference"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus-level CER: summed edit distances over summed reference lengths.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CerAccumulator {
    pub errors: usize,
    pub ref_len: usize,
}

impl CerAccumulator {
    pub fn add<T: PartialEq>(&mut self, reference: &[T], hypothesis: &[T]) {
        self.errors += edit_distance(reference, hypothesis);
        self.ref_len += reference.len();
    }

    pub fn cer(&self) -> Result<f64> {
        if self.ref_len == 0 {
            return Err(Error::EmptyInput("corpus CER over empty references"));
        }
        Ok(self.errors as f64 / self.ref_len as f64)
    }
}
