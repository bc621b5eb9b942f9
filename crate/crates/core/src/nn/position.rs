//! T5-style relative position buckets.

/// Maps `key_position - query_position` to a bias bucket.
///
/// Bidirectional (encoder) bucketing splits the buckets into two halves by
/// sign, with keys to the right of the query in the upper half. Causal
/// (decoder) bucketing uses every bucket for keys at or left of the query and
/// sends keys to the right to bucket 0. Within a half, small distances get
/// exact buckets and larger ones share logarithmically sized buckets up to
/// `max_distance`, beyond which everything lands in the last bucket.
pub fn relative_position_bucket(
    relative_distance: i64,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> usize {
    let mut buckets = num_buckets;
    let mut offset = 0;
    let n = if bidirectional {
        buckets /= 2;
        if relative_distance > 0 {
            offset = buckets;
        }
        relative_distance.unsigned_abs()
    } else {
        (-relative_distance).max(0) as u64
    };
    let max_exact = (buckets / 2).max(1) as u64;
    if n < max_exact {
        return offset + n as usize;
    }
    let log_ratio = (n as f64 / max_exact as f64).ln()
        / (max_distance as f64 / max_exact as f64).ln();
    let large = max_exact as f64 + log_ratio * (buckets as u64 - max_exact) as f64;
    // Float-to-int `as` saturates, so huge distances stay finite before the clamp.
    let large = (large as u64).min(buckets as u64 - 1);
    offset + large as usize
}
