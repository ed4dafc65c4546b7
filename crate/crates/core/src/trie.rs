//! Prefix tree over linearized KB entities.
//!
//! Each root-to-terminal path spells one entity as
//! `[a_1] v_1 ... [a_K] v_K </s>`. Decoding walks the trie along the tokens
//! generated so far; the children of the reached node are the only tokens
//! allowed at the next step, and the model's distribution is renormalized
//! over them.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::distribution::{TokenDistribution, MIN_ALLOWED_MASS};
use crate::error::{EcoError, Result};
use crate::kb::{KnowledgeBase, TokenId, Vocabulary, EOS_ID, UNK_ID};

#[derive(Debug, Clone, PartialEq, Eq)]
struct TrieNode {
    token: Option<TokenId>,
    children: BTreeMap<TokenId, usize>,
    terminal: bool,
}

/// Token ids permitted at one decode step, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllowedSet(Vec<TokenId>);

impl AllowedSet {
    pub fn new(mut ids: Vec<TokenId>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        AllowedSet(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct EntityTrie {
    nodes: Vec<TrieNode>,
    source_fingerprint: String,
    domain: String,
    max_depth: usize,
}

const ROOT: usize = 0;

impl EntityTrie {
    pub fn build(kb: &KnowledgeBase, vocab: &Vocabulary) -> Result<Self> {
        if kb.is_empty() {
            return Err(EcoError::EmptyKnowledgeBase);
        }
        let mut trie = EntityTrie {
            nodes: vec![TrieNode {
                token: None,
                children: BTreeMap::new(),
                terminal: false,
            }],
            source_fingerprint: kb.fingerprint(),
            domain: kb.domain().to_string(),
            max_depth: 0,
        };
        for entity in kb.entities() {
            let words = kb.linearize(entity.id)?;
            let ids = vocab.encode(&words);
            if let Some(pos) = ids.iter().position(|&i| i == UNK_ID) {
                return Err(EcoError::SchemaMismatch {
                    entity: entity.id,
                    reason: format!("token {:?} is missing from the vocabulary", words[pos]),
                });
            }
            trie.insert(&ids);
        }
        Ok(trie)
    }

    fn insert(&mut self, seq: &[TokenId]) {
        let mut node = ROOT;
        for &tok in seq {
            node = match self.nodes[node].children.get(&tok) {
                Some(&next) => next,
                None => {
                    let next = self.nodes.len();
                    self.nodes.push(TrieNode {
                        token: Some(tok),
                        children: BTreeMap::new(),
                        terminal: tok == EOS_ID,
                    });
                    self.nodes[node].children.insert(tok, next);
                    next
                }
            };
        }
        self.max_depth = self.max_depth.max(seq.len());
    }

    pub fn fingerprint(&self) -> &str {
        &self.source_fingerprint
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Length of the longest path, EOS included.
    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    /// Walks `prefix` from the root and returns the reached node.
    pub fn walk(&self, prefix: &[TokenId]) -> Result<usize> {
        let mut node = ROOT;
        for (position, tok) in prefix.iter().enumerate() {
            node = *self.nodes[node]
                .children
                .get(tok)
                .ok_or(EcoError::InvalidPrefix { position })?;
        }
        Ok(node)
    }

    /// Child of `node` reached by `token`, if any.
    pub fn step(&self, node: usize, token: TokenId) -> Option<usize> {
        self.nodes[node].children.get(&token).copied()
    }

    pub fn children(&self, node: usize) -> AllowedSet {
        AllowedSet(self.nodes[node].children.keys().copied().collect())
    }

    pub fn is_terminal(&self, node: usize) -> bool {
        self.nodes[node].terminal
    }

    pub fn allowed_tokens(&self, prefix: &[TokenId]) -> Result<AllowedSet> {
        self.walk(prefix).map(|n| self.children(n))
    }

    /// True if `seq` is a complete root-to-EOS path.
    pub fn contains(&self, seq: &[TokenId]) -> bool {
        matches!(self.walk(seq), Ok(n) if self.nodes[n].terminal)
    }

    /// All root-to-terminal paths, in token-id order.
    pub fn paths(&self) -> Vec<Vec<TokenId>> {
        let mut out = Vec::new();
        let mut stack = vec![(ROOT, Vec::new())];
        while let Some((node, path)) = stack.pop() {
            if self.nodes[node].terminal {
                out.push(path);
                continue;
            }
            for (&tok, &child) in self.nodes[node].children.iter().rev() {
                let mut p = path.clone();
                p.push(tok);
                stack.push((child, p));
            }
        }
        out
    }

    /// Adjacency dump with token strings, for debugging.
    pub fn dump(&self, vocab: &Vocabulary) -> TrieDump {
        TrieDump {
            version: crate::FORMAT_VERSION,
            domain: self.domain.clone(),
            fingerprint: self.source_fingerprint.clone(),
            node_count: self.nodes.len(),
            path_count: self.paths().len(),
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(id, n)| DumpNode {
                    id,
                    token: n.token.map(|t| vocab.token(t).to_string()),
                    terminal: n.terminal,
                    children: n
                        .children
                        .iter()
                        .map(|(&t, &c)| (vocab.token(t).to_string(), c))
                        .collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct TrieDump {
    pub version: u32,
    pub domain: String,
    pub fingerprint: String,
    pub node_count: usize,
    pub path_count: usize,
    pub nodes: Vec<DumpNode>,
}

#[derive(Debug, Serialize)]
pub struct DumpNode {
    pub id: usize,
    pub token: Option<String>,
    pub terminal: bool,
    pub children: BTreeMap<String, usize>,
}

/// Zeroes mass outside `allowed` and renormalizes the rest by its total.
pub fn constrain(dist: &TokenDistribution, allowed: &AllowedSet) -> Result<TokenDistribution> {
    let probs = constrain_probs(dist.probs(), allowed)?;
    TokenDistribution::new(probs)
}

pub(crate) fn constrain_probs(probs: &[f64], allowed: &AllowedSet) -> Result<Vec<f64>> {
    if allowed.is_empty() {
        return Err(EcoError::EmptyAllowedSet);
    }
    let mass: f64 = allowed
        .ids()
        .iter()
        .map(|&i| probs.get(i as usize).copied().unwrap_or(0.0))
        .sum();
    if mass.is_nan() || mass < MIN_ALLOWED_MASS {
        return Err(EcoError::DegenerateDistribution { mass });
    }
    let mut out = vec![0.0; probs.len()];
    for &i in allowed.ids() {
        if let Some(p) = probs.get(i as usize) {
            out[i as usize] = p / mass;
        }
    }
    Ok(out)
}
