/// Linear exploration decay from `start` to `end` over `horizon` episodes,
/// constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: usize,
}

impl EpsilonSchedule {
    pub const START: f64 = 0.9;
    pub const END: f64 = 0.0;

    /// Decays over the first `decay_frac` of `episodes`.
    pub fn for_run(episodes: usize, decay_frac: f64) -> Self {
        let horizon = ((episodes as f64 * decay_frac).round() as usize).max(1);
        EpsilonSchedule { start: Self::START, end: Self::END, horizon }
    }

    pub fn value(&self, episode: usize) -> f64 {
        if episode >= self.horizon {
            return self.end;
        }
        let frac = episode as f64 / self.horizon as f64;
        (self.start + (self.end - self.start) * frac).clamp(self.end.min(self.start), self.start.max(self.end))
    }
}
