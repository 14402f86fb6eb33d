use crate::StatsError;

/// Time-weighted percentile of a sampled series.
///
/// Each `(t_ns, value)` sample holds until the next timestamp; the last one
/// holds until `window_end_ns`. Returns the smallest sampled value `v` such
/// that the total time spent at or below `v` is at least `percent`% of the
/// window. Plateaus resolve to the smallest qualifying value.
pub fn upper_bound(series: &[(u64, u64)], window_end_ns: u64, percent: u32) -> Result<u64, StatsError> {
    if series.is_empty() {
        return Err(StatsError::EmptySeries);
    }
    if !(1..=100).contains(&percent) {
        return Err(StatsError::InvalidPercent(percent));
    }
    if let Some(i) = series.windows(2).position(|w| w[1].0 <= w[0].0) {
        return Err(StatsError::NonIncreasingTimestamps { index: i + 1 });
    }
    let last_t = series[series.len() - 1].0;
    if window_end_ns < last_t {
        return Err(StatsError::WindowEndsBeforeLastSample);
    }

    let mut held: Vec<(u64, u128)> = series
        .iter()
        .enumerate()
        .map(|(i, &(t, v))| {
            let until = series.get(i + 1).map_or(window_end_ns, |next| next.0);
            (v, u128::from(until - t))
        })
        .collect();
    let total: u128 = held.iter().map(|&(_, d)| d).sum();
    if total == 0 {
        // Degenerate window (single sample ending where it starts).
        return Ok(held.iter().map(|&(v, _)| v).min().unwrap_or_default());
    }
    held.sort_unstable_by_key(|&(v, _)| v);

    let mut cumulative = 0u128;
    for (v, d) in held.iter().copied() {
        cumulative += d;
        if cumulative * 100 >= total * u128::from(percent) {
            return Ok(v);
        }
    }
    Ok(held[held.len() - 1].0)
}

/// [`upper_bound`] at 95% with an inferred window end: the final sample holds
/// for the mean sampling interval, so a uniformly sampled series weights every
/// sample equally.
pub fn upper_bound_95(series: &[(u64, u64)]) -> Result<u64, StatsError> {
    let end = match series {
        [] => return Err(StatsError::EmptySeries),
        [(t, _)] => *t,
        [first, .., last] => {
            let spacing = (last.0.saturating_sub(first.0)) / (series.len() as u64 - 1);
            last.0.saturating_add(spacing)
        }
    };
    upper_bound(series, end, 95)
}
