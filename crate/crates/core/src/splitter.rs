use crate::corpus::{heuristic_split, split_at_boundaries, Boundaries};

/// Anything that predicts subtoken boundaries for a merged lowercase string.
pub trait Splitter {
    fn split(&self, merged: &str) -> Boundaries;

    /// Splits many strings at once; batched models override this.
    fn split_batch(&self, merged: &[&str]) -> Vec<Boundaries> {
        merged.iter().map(|m| self.split(m)).collect()
    }
}

impl<S: Splitter + ?Sized> Splitter for &S {
    fn split(&self, merged: &str) -> Boundaries {
        (**self).split(merged)
    }

    fn split_batch(&self, merged: &[&str]) -> Vec<Boundaries> {
        (**self).split_batch(merged)
    }
}

impl<S: Splitter + ?Sized> Splitter for Box<S> {
    fn split(&self, merged: &str) -> Boundaries {
        (**self).split(merged)
    }

    fn split_batch(&self, merged: &[&str]) -> Vec<Boundaries> {
        (**self).split_batch(merged)
    }
}

/// Never splits.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Splitter for Identity {
    fn split(&self, _merged: &str) -> Boundaries {
        Boundaries::new()
    }
}

/// Applies the naming-convention heuristics first, then refines every part
/// with `splitter`. Heuristic boundaries are always preserved.
pub fn split_identifier<S: Splitter + ?Sized>(splitter: &S, identifier: &str) -> Vec<String> {
    let mut out = Vec::new();
    for part in heuristic_split(identifier) {
        let boundaries = splitter.split(&part);
        out.extend(split_at_boundaries(&part, &boundaries).into_iter().map(str::to_string));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Every;
    impl Splitter for Every {
        fn split(&self, merged: &str) -> Boundaries {
            (1..merged.len()).collect()
        }
    }

    #[test]
    fn heuristic_parts_survive_refinement() {
        assert_eq!(split_identifier(&Identity, "foo_bar"), ["foo", "bar"]);
        assert_eq!(split_identifier(&Every, "ab_C"), ["a", "b", "c"]);
        assert!(split_identifier(&Identity, "").is_empty());
    }
}
