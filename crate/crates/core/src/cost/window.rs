use super::CostError;

/// Frames that fall inside the warm-up period: `ceil(warmup_s / frame_period_s)`.
pub fn warmup_frames(warmup_s: f64, frame_period_s: f64) -> usize {
    if warmup_s <= 0.0 {
        return 0;
    }
    (warmup_s / frame_period_s).ceil() as usize
}

/// Mean per-frame energy over complete `window`-frame windows after warm-up.
pub fn sliding_window_energy(
    per_frame_j: &[f64],
    window: usize,
    warmup_s: f64,
    frame_period_s: f64,
) -> Result<f64, CostError> {
    let skip = warmup_frames(warmup_s, frame_period_s);
    let window = window.max(1);
    let usable = per_frame_j.len().saturating_sub(skip) / window;
    if usable == 0 {
        return Err(CostError::InsufficientFrames {
            needed: skip + window,
            got: per_frame_j.len(),
        });
    }
    let means: Vec<f64> = per_frame_j[skip..skip + usable * window]
        .chunks(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    Ok(means.iter().sum::<f64>() / means.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_energy() {
        let e = vec![2.0; 1000];
        assert_eq!(sliding_window_energy(&e, 100, 30.0, 0.05).unwrap(), 2.0);
    }

    #[test]
    fn two_windows_average() {
        let mut e = vec![1.0; 100];
        e.extend(vec![3.0; 100]);
        assert_eq!(sliding_window_energy(&e, 100, 0.0, 0.05).unwrap(), 2.0);
    }

    #[test]
    fn warmup_frame_count() {
        assert_eq!(warmup_frames(30.0, 0.05), 600);
        assert_eq!(warmup_frames(0.12, 0.05), 3);
        assert_eq!(warmup_frames(0.0, 0.05), 0);
    }

    #[test]
    fn too_short_is_an_error() {
        assert!(matches!(
            sliding_window_energy(&[1.0; 650], 100, 30.0, 0.05),
            Err(CostError::InsufficientFrames {
                needed: 700,
                got: 650
            })
        ));
    }
}
