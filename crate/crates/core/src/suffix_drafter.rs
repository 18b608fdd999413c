//! Suffix-statistics drafter for linear (non-tree) speculation.
//!
//! Two scopes are indexed: the prompt, and the committed generation. Each is
//! a depth-bounded suffix trie where a node's count is the number of
//! occurrences of its string in the scope. Drafting matches the longest
//! suffix of the live context that has at least one recorded continuation,
//! then walks the most frequent continuation greedily.
//!
//! Routing score: for each drafted token, the fraction of the current
//! pattern's continuing occurrences that continue with that token, summed
//! over the draft. It lies in `[0, draft.len()]`.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuffixParams {
    /// Draft length cap as a multiple of the match length.
    pub max_spec_factor: f64,
    /// Longest pattern matched against the index.
    pub max_suffix_depth: usize,
}

impl Default for SuffixParams {
    fn default() -> Self {
        Self {
            max_spec_factor: 2.0,
            max_suffix_depth: 64,
        }
    }
}

#[derive(Debug, Clone)]
struct TrieNode {
    count: u32,
    /// `(token, child)` sorted by token.
    children: Vec<(u32, u32)>,
}

/// Suffix trie over one growing token sequence, storing every substring of
/// length up to `cap`.
#[derive(Debug, Clone)]
pub struct SuffixTrie {
    cap: usize,
    nodes: Vec<TrieNode>,
    /// Nodes for the suffixes (of length `0..cap`) ending at the last token.
    active: Vec<u32>,
    len: usize,
}

impl SuffixTrie {
    pub fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            nodes: vec![TrieNode {
                count: 0,
                children: Vec::new(),
            }],
            active: vec![0],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn child(&self, node: u32, token: u32) -> Option<u32> {
        let ch = &self.nodes[node as usize].children;
        ch.binary_search_by_key(&token, |&(t, _)| t)
            .ok()
            .map(|i| ch[i].1)
    }

    fn child_or_insert(&mut self, node: u32, token: u32) -> u32 {
        let next = self.nodes.len() as u32;
        let ch = &mut self.nodes[node as usize].children;
        match ch.binary_search_by_key(&token, |&(t, _)| t) {
            Ok(i) => ch[i].1,
            Err(i) => {
                ch.insert(i, (token, next));
                self.nodes.push(TrieNode {
                    count: 0,
                    children: Vec::new(),
                });
                next
            }
        }
    }

    pub fn push(&mut self, token: u32) {
        let mut next_active = Vec::with_capacity(self.active.len() + 1);
        next_active.push(0);
        for i in 0..self.active.len() {
            let node = self.active[i];
            let child = self.child_or_insert(node, token);
            self.nodes[child as usize].count += 1;
            // the suffix ending here has length depth(node) + 1 = i + 1
            if i + 1 < self.cap {
                next_active.push(child);
            }
        }
        self.nodes[0].count += 1;
        self.active = next_active;
        self.len += 1;
    }

    pub fn extend(&mut self, tokens: &[u32]) {
        for &t in tokens {
            self.push(t);
        }
    }

    fn find(&self, pattern: &[u32]) -> Option<u32> {
        if pattern.len() > self.cap {
            return None;
        }
        pattern
            .iter()
            .try_fold(0u32, |node, &t| self.child(node, t))
    }

    /// Number of occurrences of `pattern` (the empty pattern occurs once per
    /// position).
    pub fn occurrences(&self, pattern: &[u32]) -> usize {
        self.find(pattern)
            .map_or(0, |n| self.nodes[n as usize].count as usize)
    }

    /// `(token, count)` of tokens that follow occurrences of `pattern`,
    /// ascending by token. Patterns longer than `cap - 1` report none.
    pub fn continuations(&self, pattern: &[u32]) -> Vec<(u32, usize)> {
        if pattern.len() >= self.cap {
            return Vec::new();
        }
        self.find(pattern).map_or_else(Vec::new, |n| {
            self.nodes[n as usize]
                .children
                .iter()
                .map(|&(t, c)| (t, self.nodes[c as usize].count as usize))
                .collect()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Prompt,
    Generation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearDraft {
    pub tokens: Vec<u32>,
    pub score: f64,
    pub match_length: usize,
    pub scope: Option<Scope>,
}

impl LinearDraft {
    fn empty() -> Self {
        Self {
            tokens: Vec::new(),
            score: 0.0,
            match_length: 0,
            scope: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuffixCache {
    params: SuffixParams,
    prompt: SuffixTrie,
    generation: SuffixTrie,
}

impl SuffixCache {
    /// Indexes the prompt.
    pub fn from_prompt(prompt: &[u32], params: SuffixParams) -> Self {
        let cap = params.max_suffix_depth + 1;
        let mut prompt_trie = SuffixTrie::new(cap);
        prompt_trie.extend(prompt);
        Self {
            params,
            prompt: prompt_trie,
            generation: SuffixTrie::new(cap),
        }
    }

    pub fn params(&self) -> &SuffixParams {
        &self.params
    }

    pub fn scope(&self, scope: Scope) -> &SuffixTrie {
        match scope {
            Scope::Prompt => &self.prompt,
            Scope::Generation => &self.generation,
        }
    }

    /// Records newly committed tokens, in commit order.
    pub fn extend(&mut self, committed: &[u32]) {
        self.generation.extend(committed);
    }

    fn longest_match(&self, trie: &SuffixTrie, query: &[u32]) -> usize {
        let mut best = 0;
        for m in 1..=query.len() {
            if trie.continuations(&query[query.len() - m..]).is_empty() {
                break;
            }
            best = m;
        }
        best
    }

    /// Linear draft continuing `context ++ [t_next]`.
    pub fn suffix_linear(&self, context: &[u32], t_next: u32) -> LinearDraft {
        let depth = self.params.max_suffix_depth;
        if depth == 0 {
            return LinearDraft::empty();
        }
        let tail_start = (context.len() + 1).saturating_sub(depth);
        let mut query: Vec<u32> = context[tail_start.min(context.len())..].to_vec();
        query.push(t_next);

        let m_prompt = self.longest_match(&self.prompt, &query);
        let m_gen = self.longest_match(&self.generation, &query);
        let (scope, m) = if m_gen >= m_prompt {
            (Scope::Generation, m_gen)
        } else {
            (Scope::Prompt, m_prompt)
        };
        if m == 0 {
            return LinearDraft::empty();
        }
        let trie = self.scope(scope);
        let limit = (self.params.max_spec_factor * m as f64).floor() as usize;
        let mut pattern = query[query.len() - m..].to_vec();
        let mut tokens = Vec::new();
        let mut score = 0.0;
        while tokens.len() < limit {
            let cont = trie.continuations(&pattern);
            let total: usize = cont.iter().map(|&(_, c)| c).sum();
            // ties go to the lower token: `cont` is ascending and max_by keeps the last max
            let Some(&(tok, count)) = cont
                .iter()
                .rev()
                .max_by(|a, b| a.1.cmp(&b.1))
            else {
                break;
            };
            score += count as f64 / total as f64;
            tokens.push(tok);
            pattern.push(tok);
            if pattern.len() > depth {
                pattern.remove(0);
            }
        }
        LinearDraft {
            tokens,
            score,
            match_length: m,
            scope: Some(scope),
        }
    }
}
