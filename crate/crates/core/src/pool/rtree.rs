use std::collections::BTreeMap;

use crate::types::{align_down, RecordId, TokenId};

#[derive(Debug, Clone, Default)]
struct Node {
    key: Vec<TokenId>,
    record: Option<RecordId>,
    children: BTreeMap<TokenId, Node>,
}

/// Flattened view of one tree node, for inspection and tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNodeView {
    /// Tokens above this node.
    pub depth: usize,
    pub key: Vec<TokenId>,
    pub record: Option<RecordId>,
    pub children: usize,
}

/// Radix tree over chunk-aligned token sequences.
///
/// The top level is a forest: sequences with no common first token live under
/// different roots.
#[derive(Debug, Clone)]
pub struct RadixTree {
    roots: BTreeMap<TokenId, Node>,
    tokens_per_chunk: usize,
    records: usize,
}

fn common_prefix(a: &[TokenId], b: &[TokenId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

impl RadixTree {
    pub fn new(tokens_per_chunk: usize) -> Self {
        assert!(tokens_per_chunk > 0, "tokens_per_chunk must be positive");
        Self { roots: BTreeMap::new(), tokens_per_chunk, records: 0 }
    }

    pub fn tokens_per_chunk(&self) -> usize {
        self.tokens_per_chunk
    }

    pub fn len(&self) -> usize {
        self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records == 0
    }

    pub fn root_count(&self) -> usize {
        self.roots.len()
    }

    /// Records `tokens -> record`. The key must be non-empty and chunk-aligned.
    /// Returns the record previously stored under the identical key, if any.
    pub fn insert(&mut self, tokens: &[TokenId], record: RecordId) -> Option<RecordId> {
        assert!(
            !tokens.is_empty() && tokens.len() % self.tokens_per_chunk == 0,
            "radix keys must be non-empty and chunk-aligned (len {})",
            tokens.len()
        );
        let replaced = Self::insert_into(&mut self.roots, tokens, record);
        if replaced.is_none() {
            self.records += 1;
        }
        replaced
    }

    fn insert_into(
        children: &mut BTreeMap<TokenId, Node>,
        tokens: &[TokenId],
        record: RecordId,
    ) -> Option<RecordId> {
        let Some(node) = children.get_mut(&tokens[0]) else {
            children.insert(
                tokens[0],
                Node { key: tokens.to_vec(), record: Some(record), children: BTreeMap::new() },
            );
            return None;
        };
        let common = common_prefix(&node.key, tokens);
        if common < node.key.len() {
            // Split at the divergence point; the old node's tail becomes a child.
            let tail = Node {
                key: node.key.split_off(common),
                record: node.record.take(),
                children: std::mem::take(&mut node.children),
            };
            node.children.insert(tail.key[0], tail);
        }
        if common == tokens.len() {
            node.record.replace(record)
        } else {
            Self::insert_into(&mut node.children, &tokens[common..], record)
        }
    }

    /// Finds the longest chunk-aligned common prefix between `tokens` and any
    /// recorded key, returning a record that covers it and the matched length.
    /// Among covering records the one with the shortest key wins, then the
    /// lowest in key order. The tree is not modified.
    pub fn match_prefix(&self, tokens: &[TokenId]) -> Option<(RecordId, usize)> {
        let mut path: Vec<(&Node, usize)> = Vec::new();
        let mut children = &self.roots;
        let mut pos = 0;
        while pos < tokens.len() {
            let Some(node) = children.get(&tokens[pos]) else { break };
            let common = common_prefix(&node.key, &tokens[pos..]);
            path.push((node, pos));
            pos += common;
            if common < node.key.len() {
                break;
            }
            children = &node.children;
        }
        let aligned = align_down(pos, self.tokens_per_chunk);
        if aligned == 0 {
            return None;
        }
        let (anchor, before) = path
            .into_iter()
            .find(|(n, before)| *before < aligned && aligned <= before + n.key.len())
            .expect("aligned length lies on the matched path");
        let (record, _) = Self::shortest_record(anchor, before + anchor.key.len())?;
        Some((record, aligned))
    }

    fn shortest_record(node: &Node, depth: usize) -> Option<(RecordId, usize)> {
        if let Some(r) = node.record {
            return Some((r, depth));
        }
        node.children
            .values()
            .filter_map(|c| Self::shortest_record(c, depth + c.key.len()))
            .min_by_key(|(_, d)| *d)
    }

    /// Removes the record stored under exactly `tokens`, pruning and merging
    /// nodes left without a purpose.
    pub fn remove(&mut self, tokens: &[TokenId]) -> Option<RecordId> {
        if tokens.is_empty() {
            return None;
        }
        let removed = Self::remove_from(&mut self.roots, tokens);
        if removed.is_some() {
            self.records -= 1;
        }
        removed
    }

    fn remove_from(children: &mut BTreeMap<TokenId, Node>, tokens: &[TokenId]) -> Option<RecordId> {
        let node = children.get_mut(&tokens[0])?;
        if !tokens.starts_with(&node.key) {
            return None;
        }
        let removed = if tokens.len() == node.key.len() {
            node.record.take()
        } else {
            let rest = &tokens[node.key.len()..];
            Self::remove_from(&mut node.children, rest)
        }?;
        if node.record.is_none() {
            match node.children.len() {
                0 => {
                    children.remove(&tokens[0]);
                }
                1 => {
                    let (_, child) = node.children.pop_first().expect("one child");
                    node.key.extend_from_slice(&child.key);
                    node.record = child.record;
                    node.children = child.children;
                }
                _ => {}
            }
        }
        Some(removed)
    }

    /// All recorded keys with their records, in key order.
    pub fn records(&self) -> Vec<(Vec<TokenId>, RecordId)> {
        let mut out = Vec::new();
        let mut prefix = Vec::new();
        for node in self.roots.values() {
            Self::collect(node, &mut prefix, &mut out);
        }
        out
    }

    fn collect(node: &Node, prefix: &mut Vec<TokenId>, out: &mut Vec<(Vec<TokenId>, RecordId)>) {
        let len = prefix.len();
        prefix.extend_from_slice(&node.key);
        if let Some(r) = node.record {
            out.push((prefix.clone(), r));
        }
        for child in node.children.values() {
            Self::collect(child, prefix, out);
        }
        prefix.truncate(len);
    }

    /// Pre-order listing of every node.
    pub fn nodes(&self) -> Vec<TreeNodeView> {
        fn walk(node: &Node, depth: usize, out: &mut Vec<TreeNodeView>) {
            out.push(TreeNodeView {
                depth,
                key: node.key.clone(),
                record: node.record,
                children: node.children.len(),
            });
            for c in node.children.values() {
                walk(c, depth + node.key.len(), out);
            }
        }
        let mut out = Vec::new();
        for r in self.roots.values() {
            walk(r, 0, &mut out);
        }
        out
    }
}
