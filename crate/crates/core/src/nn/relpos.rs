use serde::{Deserialize, Serialize};

/// Sequence position of an attention query or key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Position {
    /// Text token at this index.
    Token(usize),
    /// A visual slot; carries no sequence position.
    Visual,
}

/// Bidirectional log-spaced relative position bucketing.
///
/// The last bucket (`num_buckets - 1`) is reserved for every pair involving
/// a visual slot. Text pairs use `half = (num_buckets - 1) / 2` buckets per
/// direction: keys at or before the query land in `[0, half)`, keys after it
/// in `[half, 2·half)`. Within a direction, distances below `half / 2` get
/// their own bucket and larger ones share log-spaced buckets up to
/// `max_distance`, beyond which everything falls in the last bucket of that
/// direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelativeBuckets {
    pub num_buckets: usize,
    pub max_distance: usize,
}

impl Default for RelativeBuckets {
    fn default() -> Self {
        RelativeBuckets {
            num_buckets: 32,
            max_distance: 64,
        }
    }
}

impl RelativeBuckets {
    pub fn reserved(&self) -> usize {
        self.num_buckets - 1
    }

    fn half(&self) -> usize {
        (self.num_buckets - 1) / 2
    }

    /// Bucket for a query at `q` attending a key at `k`.
    pub fn bucket(&self, q: Position, k: Position) -> usize {
        match (q, k) {
            (Position::Token(q), Position::Token(k)) => self.text_bucket(k as i64 - q as i64),
            _ => self.reserved(),
        }
    }

    /// Bucket for signed distance `key - query` between two text tokens.
    pub fn text_bucket(&self, delta: i64) -> usize {
        let half = self.half();
        let max_exact = (half / 2).max(1);
        let offset = if delta > 0 { half } else { 0 };
        let n = delta.unsigned_abs() as usize;
        let mag = if n < max_exact {
            n
        } else {
            let ratio = (n as f64 / max_exact as f64).ln()
                / (self.max_distance as f64 / max_exact as f64).ln();
            let b = max_exact + (ratio * (half - max_exact) as f64) as usize;
            b.min(half - 1)
        };
        offset + mag
    }

    /// Row-major `[q_len, k_len]` bucket matrix.
    pub fn matrix(&self, queries: &[Position], keys: &[Position]) -> Vec<usize> {
        let mut out = Vec::with_capacity(queries.len() * keys.len());
        for &q in queries {
            for &k in keys {
                out.push(self.bucket(q, k));
            }
        }
        out
    }
}
