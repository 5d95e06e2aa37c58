//! Periodic frame selection for cheaper gradient epochs.
//!
//! Epoch `r` uses only the frames whose index is congruent to `r` modulo a
//! speed-up factor `K`; over any `K` consecutive epochs every frame is used
//! exactly once, so the training signal cycles through the whole video
//! without resampling.

use crate::error::{Error, Result};

/// Speed-up factor plus the current epoch's residue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SurrogateSchedule {
    factor: usize,
    epoch: usize,
}

impl SurrogateSchedule {
    pub fn new(factor: usize, epoch: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("speed-up factor must be >= 1"));
        }
        Ok(SurrogateSchedule { factor, epoch })
    }

    pub fn factor(self) -> usize {
        self.factor
    }

    pub fn epoch(self) -> usize {
        self.epoch
    }

    /// Residue class used this epoch.
    pub fn residue(self) -> usize {
        self.epoch % self.factor
    }

    /// The schedule for the next epoch.
    pub fn advance(self) -> Self {
        SurrogateSchedule {
            factor: self.factor,
            epoch: self.epoch + 1,
        }
    }

    /// Frames selected for a video of length `frames`; may be empty when the
    /// residue exceeds the video length.
    pub fn frames_for(self, frames: usize) -> Vec<usize> {
        select_frames(frames, self.factor, self.epoch)
    }
}

/// Indices `t < frames` with `t ≡ epoch (mod factor)`, ascending.
pub fn select_frames(frames: usize, factor: usize, epoch: usize) -> Vec<usize> {
    assert!(factor >= 1, "speed-up factor must be >= 1");
    let residue = epoch % factor;
    (residue..frames).step_by(factor).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn factor_one_selects_everything() {
        assert_eq!(select_frames(10, 1, 5), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn factor_three_residue_one() {
        assert_eq!(select_frames(10, 3, 1), vec![1, 4, 7]);
    }

    #[test]
    fn residue_wraps_modulo_factor() {
        assert_eq!(select_frames(10, 3, 4), vec![1, 4, 7]);
    }

    #[test]
    fn selection_can_be_empty_for_short_videos() {
        assert!(select_frames(2, 24, 5).is_empty());
    }

    #[test]
    fn factor_24_average_selection_on_185_frames() {
        // 185 frames spread over 24 residue classes: mean 185/24 ≈ 7.71
        let total: usize = (0..24).map(|r| select_frames(185, 24, r).len()).sum();
        assert_eq!(total, 185);
        let mean = total as f64 / 24.0;
        assert!((7.5..=8.0).contains(&mean), "mean {mean}");
    }

    #[test]
    fn schedule_rejects_zero_factor() {
        assert!(SurrogateSchedule::new(0, 0).is_err());
    }

    #[test]
    fn advance_moves_residue() {
        let s = SurrogateSchedule::new(3, 2).unwrap();
        assert_eq!(s.residue(), 2);
        assert_eq!(s.advance().residue(), 0);
    }

    proptest! {
        #[test]
        fn prop_residue_classes_partition_frames(
            frames in 1usize..500,
            factor in 1usize..32,
        ) {
            let mut seen = vec![0usize; frames];
            for r in 0..factor {
                let sel = select_frames(frames, factor, r);
                prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
                for t in sel {
                    seen[t] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }
}
