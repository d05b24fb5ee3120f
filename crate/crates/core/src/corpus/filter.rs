use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{Corpus, MemeRecord, TemplateRecord};
use crate::tokenize::Tokenizer;

/// Thresholds for keeping popular templates with usable instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_instances: usize,
    pub min_text_tokens: usize,
    /// `usize::MAX` keeps every template that passes `min_instances`.
    pub top_k_templates: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_instances: 150,
            min_text_tokens: 0,
            top_k_templates: 50,
        }
    }
}

/// Lowercases, turns punctuation into spaces and collapses whitespace.
pub fn normalize_title(s: &str) -> String {
    let mapped: String = s
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .flat_map(char::to_lowercase)
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn qualifies(meme: &MemeRecord, template: &TemplateRecord, cfg: &FilterConfig, tok: &dyn Tokenizer) -> bool {
    tok.count(&meme.embedded_text) >= cfg.min_text_tokens
        && normalize_title(&meme.title) != normalize_title(&template.name)
}

/// Keeps qualifying memes of the `top_k_templates` templates that have at
/// least `min_instances` qualifying memes.
///
/// A meme qualifies when its embedded text is long enough and its title is
/// not just the template name. Ranking ties go to the smaller template id.
/// Any split assignment is restricted to the surviving memes.
pub fn filter_corpus(corpus: &Corpus, cfg: &FilterConfig, tok: &dyn Tokenizer) -> Corpus {
    let templates = corpus.template_index();
    let qualifying: Vec<&MemeRecord> = corpus
        .memes
        .iter()
        .filter(|m| qualifies(m, templates[m.template_id.as_str()], cfg, tok))
        .collect();

    let mut counts: HashMap<&str, usize> = corpus
        .templates
        .iter()
        .map(|t| (t.template_id.as_str(), 0))
        .collect();
    for m in &qualifying {
        *counts.get_mut(m.template_id.as_str()).unwrap() += 1;
    }

    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, n)| n >= cfg.min_instances)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(cfg.top_k_templates);
    let keep: HashSet<&str> = ranked.into_iter().map(|(id, _)| id).collect();

    let memes: Vec<MemeRecord> = qualifying
        .into_iter()
        .filter(|m| keep.contains(m.template_id.as_str()))
        .cloned()
        .collect();
    let split_assignment = corpus.split_assignment.as_ref().map(|assign| {
        memes
            .iter()
            .filter_map(|m| assign.get(&m.meme_id).map(|s| (m.meme_id.clone(), *s)))
            .collect()
    });
    Corpus {
        templates: corpus
            .templates
            .iter()
            .filter(|t| keep.contains(t.template_id.as_str()))
            .cloned()
            .collect(),
        memes,
        split_assignment,
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::*;
    use super::*;
    use crate::tokenize::Whitespace;
    use proptest::prelude::*;

    fn identity() -> FilterConfig {
        FilterConfig {
            min_instances: 0,
            min_text_tokens: 0,
            top_k_templates: usize::MAX,
        }
    }

    fn corpus_with_counts(counts: &[(&str, usize)]) -> Corpus {
        let templates = counts.iter().map(|(id, _)| template(id, &format!("name {id}"))).collect();
        let memes = counts
            .iter()
            .flat_map(|(id, n)| (0..*n).map(move |i| meme(&format!("{id}-{i}"), id, "a title", "some text here")))
            .collect();
        Corpus::new(templates, memes).unwrap()
    }

    #[test]
    fn template_with_149_qualifying_is_removed() {
        let corpus = corpus_with_counts(&[("a", 149), ("b", 150)]);
        let out = filter_corpus(&corpus, &FilterConfig { min_instances: 150, ..identity() }, &Whitespace);
        let ids: Vec<_> = out.templates.iter().map(|t| t.template_id.as_str()).collect();
        assert_eq!(ids, vec!["b"]);
        assert_eq!(out.memes.len(), 150);
    }

    #[test]
    fn title_equal_to_template_name_does_not_qualify() {
        let corpus = Corpus::new(
            vec![template("t", "Futurama-Fry")],
            vec![
                meme("m1", "t", "futurama  fry!", "text"),
                meme("m2", "t", "Not sure if", "text"),
            ],
        )
        .unwrap();
        let out = filter_corpus(&corpus, &identity(), &Whitespace);
        assert_eq!(out.memes.len(), 1);
        assert_eq!(out.memes[0].meme_id, "m2");
    }

    #[test]
    fn identity_thresholds_leave_corpus_unchanged() {
        let corpus = small();
        assert_eq!(filter_corpus(&corpus, &identity(), &Whitespace), corpus);
    }

    #[test]
    fn short_text_is_excluded() {
        let corpus = small();
        let cfg = FilterConfig { min_text_tokens: 5, ..identity() };
        let out = filter_corpus(&corpus, &cfg, &Whitespace);
        let ids: Vec<_> = out.memes.iter().map(|m| m.meme_id.as_str()).collect();
        assert_eq!(ids, vec!["m2"]);
    }

    #[test]
    fn top_k_ties_break_by_template_id() {
        let corpus = corpus_with_counts(&[("c", 3), ("a", 3), ("b", 5)]);
        let cfg = FilterConfig { top_k_templates: 2, ..identity() };
        let out = filter_corpus(&corpus, &cfg, &Whitespace);
        let mut ids: Vec<_> = out.templates.iter().map(|t| t.template_id.clone()).collect();
        ids.sort();
        assert_eq!(ids, vec!["a", "b"]);
    }

    fn arb_corpus() -> impl Strategy<Value = Corpus> {
        prop::collection::vec((0usize..4, 0usize..6, any::<bool>()), 0..60).prop_map(|rows| {
            let templates = (0..4).map(|i| template(&format!("t{i}"), &format!("Tmpl {i}"))).collect();
            let memes = rows
                .into_iter()
                .enumerate()
                .map(|(i, (t, ntok, same_title))| {
                    let title = if same_title { format!("tmpl {t}") } else { format!("title {i}") };
                    let text = vec!["w"; ntok].join(" ");
                    meme(&format!("m{i}"), &format!("t{t}"), &title, &text)
                })
                .collect();
            Corpus::new(templates, memes).unwrap()
        })
    }

    proptest! {
        #[test]
        fn filter_is_idempotent_and_shrinking(corpus in arb_corpus(), min_inst in 0usize..8, min_tok in 0usize..6, k in 1usize..5) {
            let cfg = FilterConfig { min_instances: min_inst, min_text_tokens: min_tok, top_k_templates: k };
            let once = filter_corpus(&corpus, &cfg, &Whitespace);
            let twice = filter_corpus(&once, &cfg, &Whitespace);
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.memes.len() <= corpus.memes.len());
            prop_assert!(once.templates.len() <= corpus.templates.len().min(k));
            for t in &once.templates {
                let n = once.memes.iter().filter(|m| m.template_id == t.template_id && qualifies(m, t, &cfg, &Whitespace)).count();
                prop_assert!(n >= min_inst);
            }
        }
    }
}
