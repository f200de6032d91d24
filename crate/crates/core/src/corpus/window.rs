use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Speaker};

/// Span of turns over which the transition graph is built.
///
/// `node_turns` lists the history turns from `start_index` onward followed
/// by the placeholder for the upcoming supporter response at `end_index`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionWindow {
    pub start_index: usize,
    pub end_index: usize,
    pub node_turns: Vec<(usize, Speaker)>,
}

impl TransitionWindow {
    pub fn len(&self) -> usize {
        self.node_turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_turns.is_empty()
    }

    pub fn placeholder(&self) -> (usize, Speaker) {
        *self.node_turns.last().expect("window always holds the placeholder")
    }
}

/// Window over `history` speakers: starts at the `w`-th latest supporter
/// turn, or at the first turn when fewer than `w` supporter turns exist.
pub fn window_over(history: &[Speaker], w: usize) -> TransitionWindow {
    let supporters: Vec<usize> = history
        .iter()
        .enumerate()
        .filter(|(_, s)| **s == Speaker::Supporter)
        .map(|(i, _)| i)
        .collect();
    let start = if w >= 1 && supporters.len() >= w {
        supporters[supporters.len() - w]
    } else {
        0
    };
    let end = history.len();
    let mut node_turns: Vec<(usize, Speaker)> = (start..end).map(|i| (i, history[i])).collect();
    node_turns.push((end, Speaker::Supporter));
    TransitionWindow {
        start_index: start,
        end_index: end,
        node_turns,
    }
}

/// Window for an example whose final utterance is the response being generated.
pub fn make_window(dialogue: &Dialogue, w: usize) -> TransitionWindow {
    let n = dialogue.utterances.len().saturating_sub(1);
    let history: Vec<Speaker> = dialogue.utterances[..n].iter().map(|u| u.speaker).collect();
    window_over(&history, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Speaker::{Seeker as K, Supporter as P};

    #[test]
    fn two_supporter_window() {
        let w = window_over(&[P, K, P, K], 2);
        assert_eq!(w.start_index, 0);
        assert_eq!(w.node_turns, vec![(0, P), (1, K), (2, P), (3, K), (4, P)]);
    }

    #[test]
    fn one_supporter_window() {
        let w = window_over(&[P, K, P, K], 1);
        assert_eq!(w.start_index, 2);
        assert_eq!(w.node_turns, vec![(2, P), (3, K), (4, P)]);
    }

    #[test]
    fn no_prior_supporter_clamps_to_start() {
        let w = window_over(&[K, K], 2);
        assert_eq!(w.start_index, 0);
        assert_eq!(w.len(), 3);
        assert_eq!(w.placeholder(), (2, P));
    }
}
