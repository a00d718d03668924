//! Sentence sentiment used to boost salience of emotionally charged
//! sentences.

use std::collections::HashMap;

use crate::embed::word_tokens;

pub trait SentimentProvider: Send + Sync {
    fn name(&self) -> &str;
    /// Score in `[-1, 1]`; 0 for neutral or empty text.
    fn score(&self, text: &str) -> f64;
}

/// Word valences for the built-in provider. Small on purpose: narrative
/// vocabulary with an obvious polarity.
const LEXICON: &[(&str, f64)] = &[
    ("abandon", -0.6),
    ("abandoned", -0.6),
    ("afraid", -0.6),
    ("agony", -0.9),
    ("alone", -0.4),
    ("anger", -0.7),
    ("angry", -0.7),
    ("anxious", -0.5),
    ("awful", -0.8),
    ("bad", -0.6),
    ("beautiful", 0.7),
    ("beloved", 0.8),
    ("betray", -0.8),
    ("betrayed", -0.8),
    ("bitter", -0.5),
    ("blood", -0.5),
    ("brave", 0.6),
    ("bright", 0.4),
    ("broken", -0.5),
    ("calm", 0.4),
    ("cheerful", 0.7),
    ("cried", -0.5),
    ("cruel", -0.8),
    ("cry", -0.5),
    ("danger", -0.6),
    ("dark", -0.3),
    ("dead", -0.8),
    ("death", -0.8),
    ("delight", 0.8),
    ("delighted", 0.8),
    ("despair", -0.9),
    ("die", -0.8),
    ("died", -0.8),
    ("disaster", -0.8),
    ("dread", -0.7),
    ("enemy", -0.6),
    ("evil", -0.8),
    ("fail", -0.6),
    ("failed", -0.6),
    ("fear", -0.6),
    ("fine", 0.3),
    ("fond", 0.5),
    ("friend", 0.5),
    ("gentle", 0.5),
    ("glad", 0.6),
    ("glory", 0.7),
    ("good", 0.5),
    ("grateful", 0.7),
    ("grief", -0.8),
    ("guilty", -0.6),
    ("happy", 0.8),
    ("hate", -0.8),
    ("hated", -0.8),
    ("hope", 0.5),
    ("horrible", -0.9),
    ("hurt", -0.6),
    ("joy", 0.9),
    ("kill", -0.9),
    ("killed", -0.9),
    ("kind", 0.5),
    ("laugh", 0.6),
    ("laughed", 0.6),
    ("lonely", -0.6),
    ("lost", -0.5),
    ("love", 0.8),
    ("loved", 0.8),
    ("lovely", 0.7),
    ("lucky", 0.6),
    ("miserable", -0.8),
    ("murder", -1.0),
    ("nice", 0.5),
    ("pain", -0.7),
    ("peace", 0.6),
    ("pleasant", 0.6),
    ("proud", 0.5),
    ("rage", -0.8),
    ("sad", -0.6),
    ("safe", 0.5),
    ("scared", -0.6),
    ("scream", -0.6),
    ("screamed", -0.6),
    ("shame", -0.6),
    ("sick", -0.5),
    ("smile", 0.6),
    ("smiled", 0.6),
    ("sorrow", -0.7),
    ("strong", 0.4),
    ("success", 0.7),
    ("suffer", -0.7),
    ("terrible", -0.9),
    ("terror", -0.9),
    ("thank", 0.5),
    ("tragic", -0.8),
    ("triumph", 0.8),
    ("ugly", -0.5),
    ("warm", 0.4),
    ("weep", -0.6),
    ("wept", -0.6),
    ("win", 0.7),
    ("wonderful", 0.9),
    ("worry", -0.5),
    ("wounded", -0.7),
    ("wrong", -0.5),
];

/// Averages the valence of lexicon words found in the text. Words outside
/// the lexicon do not dilute the average.
#[derive(Debug, Clone)]
pub struct LexiconSentiment {
    valence: HashMap<String, f64>,
}

impl LexiconSentiment {
    pub fn builtin() -> Self {
        Self::from_pairs(LEXICON.iter().map(|(w, v)| (w.to_string(), *v)))
    }

    pub fn from_pairs<I: IntoIterator<Item = (String, f64)>>(pairs: I) -> Self {
        LexiconSentiment {
            valence: pairs
                .into_iter()
                .map(|(w, v)| (w.to_lowercase(), v.clamp(-1.0, 1.0)))
                .collect(),
        }
    }
}

impl Default for LexiconSentiment {
    fn default() -> Self {
        Self::builtin()
    }
}

impl SentimentProvider for LexiconSentiment {
    fn name(&self) -> &str {
        "lexicon"
    }

    fn score(&self, text: &str) -> f64 {
        let (sum, hits) = word_tokens(text)
            .filter_map(|w| self.valence.get(&w).copied())
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if hits == 0 {
            0.0
        } else {
            (sum / hits as f64).clamp(-1.0, 1.0)
        }
    }
}

/// Scales each score by `1 + |sentiment|` of its sentence.
pub fn sentiment_adjust<S: AsRef<str>>(scores: &[f64], sentences: &[S], provider: &dyn SentimentProvider) -> Vec<f64> {
    assert_eq!(scores.len(), sentences.len(), "one score per sentence");
    scores
        .iter()
        .zip(sentences)
        .map(|(s, text)| s * (1.0 + provider.score(text.as_ref()).abs()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neutral_text_scores_zero() {
        let p = LexiconSentiment::builtin();
        assert_eq!(p.score(""), 0.0);
        assert_eq!(p.score("the"), 0.0);
        assert_eq!(sentiment_adjust(&[0.3, -2.0], &["the", "a table"], &p), vec![0.3, -2.0]);
    }

    #[test]
    fn mixed_sentence_by_hand() {
        // "happy" 0.8, "death" -0.8, "terrible" -0.9; the rest are not in the lexicon.
        let p = LexiconSentiment::builtin();
        let s = p.score("A happy man met a terrible death.");
        assert!((s - (0.8 - 0.8 - 0.9) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn extreme_sentiment_doubles() {
        let p = LexiconSentiment::from_pairs([("doom".to_string(), -1.0), ("bliss".to_string(), 1.0)]);
        assert_eq!(sentiment_adjust(&[0.5, -0.25], &["doom", "bliss"], &p), vec![1.0, -0.5]);
    }
}
