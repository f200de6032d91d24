//! Small templated support dialogues for smoke tests and overfitting checks.
//!
//! Dialogue `i` gets topic `i % 8` and seeker emotion `(i / 8 + i) % 5`, so the
//! first 40 dialogues have distinct (topic, emotion) contexts and the final
//! supporter turn is a function of its history.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Dialogue, Emotion, Strategy, Utterance};

const TOPICS: [(&str, &str); 8] = [
    ("job", "fired me last week"),
    ("exam", "went badly yesterday"),
    ("partner", "left me suddenly"),
    ("family", "keeps fighting every night"),
    ("health", "got worse this month"),
    ("rent", "went up again"),
    ("friend", "stopped talking to me"),
    ("dog", "ran away on sunday"),
];

const EMOTIONS: [(Emotion, &str); 5] = [
    (Emotion::Sadness, "sad"),
    (Emotion::Anger, "angry"),
    (Emotion::Fear, "scared"),
    (Emotion::Disgust, "disgusted"),
    (Emotion::Joy, "hopeful"),
];

fn response(strategy: Strategy, topic: &str, feeling: &str) -> String {
    match strategy {
        Strategy::Question => format!("how long has your {topic} bothered you ?"),
        Strategy::RestatementOrParaphrasing => format!("so your {topic} is the main problem now"),
        Strategy::ReflectionOfFeelings => format!("you sound really {feeling} about your {topic}"),
        Strategy::SelfDisclosure => format!("i once had trouble with my {topic} too"),
        Strategy::AffirmationAndReassurance => format!("you are strong enough to handle your {topic}"),
        Strategy::ProvidingSuggestions => format!("maybe talk with someone you trust about your {topic}"),
        Strategy::Information => format!("many people struggle with their {topic} at some point"),
        Strategy::Others => format!("i am here with you , {feeling} or not"),
    }
}

/// `n` dialogues of 3 to 7 utterances, each ending with a labelled supporter turn.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<Dialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (topic, event) = TOPICS[i % TOPICS.len()];
            let (emotion, feeling) = EMOTIONS[(i / TOPICS.len() + i) % EMOTIONS.len()];
            let strategy = Strategy::ALL[rng.random_range(0..Strategy::COUNT)];
            let extra_rounds = rng.random_range(0..3);

            let mut utterances = vec![
                Utterance::supporter("hello , how are you feeling today ?", Strategy::Question),
                Utterance::seeker(format!("i feel {feeling} about my {topic}")).with_emotion(emotion),
            ];
            let follow_ups = [
                (
                    Utterance::supporter(format!("what happened with your {topic} ?"), Strategy::Question),
                    Utterance::seeker(format!("my {topic} {event}")).with_emotion(emotion),
                ),
                (
                    Utterance::supporter("that must be really hard", Strategy::ReflectionOfFeelings),
                    Utterance::seeker(format!("yes , i can not stop thinking about my {topic}"))
                        .with_emotion(emotion),
                ),
            ];
            for (sup, seek) in follow_ups.into_iter().take(extra_rounds) {
                utterances.push(sup);
                utterances.push(seek);
            }
            utterances.push(Utterance::supporter(response(strategy, topic, feeling), strategy));
            Dialogue {
                id: format!("synthetic-{i}"),
                utterances,
            }
        })
        .collect()
}
