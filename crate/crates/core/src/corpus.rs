//! Knowledge bases with their tries, and the mapping from dialogs to
//! model-ready turn examples.

use crate::augment::Dialog;
use crate::error::{EcoError, Result};
use crate::kb::{KnowledgeBase, TokenId, Vocabulary, EOS_ID};
use crate::model::{source_ids, ModelConfig, TurnExample};
use crate::trie::EntityTrie;

/// Per-domain KBs and the tries built from them with one vocabulary.
#[derive(Debug, Clone)]
pub struct Domains {
    kbs: Vec<KnowledgeBase>,
    tries: Vec<EntityTrie>,
}

impl Domains {
    pub fn new(kbs: Vec<KnowledgeBase>, vocab: &Vocabulary) -> Result<Self> {
        for (i, kb) in kbs.iter().enumerate() {
            if kbs[..i].iter().any(|other| other.domain() == kb.domain()) {
                return Err(EcoError::InvalidConfig(format!(
                    "domain {} appears twice",
                    kb.domain()
                )));
            }
        }
        let tries = kbs
            .iter()
            .map(|kb| EntityTrie::build(kb, vocab))
            .collect::<Result<Vec<_>>>()?;
        Ok(Domains { kbs, tries })
    }

    pub fn index(&self, domain: &str) -> Option<usize> {
        self.kbs.iter().position(|kb| kb.domain() == domain)
    }

    pub fn kb(&self, domain: &str) -> Option<&KnowledgeBase> {
        self.index(domain).map(|i| &self.kbs[i])
    }

    pub fn trie(&self, domain: &str) -> Option<&EntityTrie> {
        self.index(domain).map(|i| &self.tries[i])
    }

    pub fn kbs(&self) -> &[KnowledgeBase] {
        &self.kbs
    }

    pub fn tries(&self) -> &[EntityTrie] {
        &self.tries
    }

    pub fn fingerprints(&self) -> Vec<String> {
        self.kbs.iter().map(KnowledgeBase::fingerprint).collect()
    }

    /// Longest linearized entity over all domains, EOS included.
    pub fn max_entity_len(&self) -> usize {
        self.kbs
            .iter()
            .map(KnowledgeBase::max_linearized_len)
            .max()
            .unwrap_or(1)
    }

    /// Fails with [`EcoError::StaleTrie`] unless every trie was built from a
    /// KB whose fingerprint is in `trained_with`.
    pub fn check_fingerprints(&self, trained_with: &[String]) -> Result<()> {
        for trie in &self.tries {
            if !trained_with.iter().any(|f| f == trie.fingerprint()) {
                return Err(EcoError::StaleTrie {
                    found: trie.fingerprint().to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Vocabulary over every KB plus every word in `dialogs`.
pub fn build_vocabulary(kbs: &[KnowledgeBase], dialogs: &[&[Dialog]]) -> Vocabulary {
    let refs: Vec<&KnowledgeBase> = kbs.iter().collect();
    let words = dialogs
        .iter()
        .flat_map(|ds| ds.iter())
        .flat_map(|d| d.turns.iter())
        .flat_map(|t| t.user.iter().chain(t.response.iter()))
        .map(String::as_str);
    Vocabulary::build(&refs, words)
}

pub fn response_ids(vocab: &Vocabulary, response: &[String]) -> Vec<TokenId> {
    let mut ids = vocab.encode(response);
    ids.push(EOS_ID);
    ids
}

/// One example per turn. Gold entities come from `gold_entity` labels.
pub fn turn_examples(
    dialogs: &[Dialog],
    domains: &Domains,
    vocab: &Vocabulary,
    config: &ModelConfig,
) -> Result<Vec<TurnExample>> {
    let mut out = Vec::new();
    for dialog in dialogs {
        let trie = domains.index(&dialog.domain);
        for (t, turn) in dialog.turns.iter().enumerate() {
            let entity = match (turn.gold_entity, trie) {
                (Some(id), Some(i)) => {
                    let words = domains.kbs[i]
                        .linearize(id)
                        .map_err(|_| EcoError::Annotation {
                            dialog: dialog.id.clone(),
                            reason: format!("turn {t} names unknown entity {id}"),
                        })?;
                    Some(vocab.encode(&words))
                }
                (Some(_), None) => {
                    return Err(EcoError::Annotation {
                        dialog: dialog.id.clone(),
                        reason: format!(
                            "labeled turn {t} in domain {} without a KB",
                            dialog.domain
                        ),
                    })
                }
                (None, _) => None,
            };
            let source = source_ids(
                vocab,
                &dialog.context(t),
                &turn.user,
                config.max_len,
                config.max_entity_len,
            );
            out.push(TurnExample {
                source,
                entity,
                response: response_ids(vocab, &turn.response),
                trie,
            });
        }
    }
    Ok(out)
}
