//! Attention layouts for one forward pass.
//!
//! A layout lists the rows entering the forward (frozen-route token rows and
//! mask rows), their position ids, and an explicit visibility matrix whose
//! columns are the cached KV positions followed by the rows themselves.
//! Three shapes are built here: packed training blocks, parallel
//! draft-and-verify decoding, and the sequential draft pass.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Route {
    /// Token row through the frozen projectors at every layer.
    Frozen,
    /// Mask row, present only in the draft layers, through the tuned projectors.
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowSpec {
    pub position: usize,
    pub route: Route,
    /// Block tag of a mask row: the anchor position in training, the branch index in decoding.
    pub block: Option<usize>,
}

impl RowSpec {
    pub fn frozen(position: usize) -> Self {
        Self { position, route: Route::Frozen, block: None }
    }

    pub fn mask(position: usize, block: usize) -> Self {
        Self { position, route: Route::Mask, block: Some(block) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayout {
    cache_len: usize,
    rows: Vec<RowSpec>,
    /// `rows.len() × (cache_len + rows.len())`, row-major.
    visible: Vec<bool>,
}

impl AttentionLayout {
    /// A layout with nothing visible; builders switch entries on.
    pub fn empty(cache_len: usize, rows: Vec<RowSpec>) -> Self {
        let width = cache_len + rows.len();
        Self { cache_len, visible: vec![false; rows.len() * width], rows }
    }

    pub fn cache_len(&self) -> usize {
        self.cache_len
    }

    pub fn rows(&self) -> &[RowSpec] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Number of visibility columns: cached positions plus in-forward rows.
    pub fn width(&self) -> usize {
        self.cache_len + self.rows.len()
    }

    pub fn n_frozen(&self) -> usize {
        self.rows.iter().filter(|r| r.route == Route::Frozen).count()
    }

    pub fn n_mask(&self) -> usize {
        self.rows.len() - self.n_frozen()
    }

    pub fn frozen_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.iter().enumerate().filter(|(_, r)| r.route == Route::Frozen).map(|(i, _)| i)
    }

    pub fn mask_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.iter().enumerate().filter(|(_, r)| r.route == Route::Mask).map(|(i, _)| i)
    }

    /// Mask rows of one block, in row order.
    pub fn block_rows(&self, block: usize) -> Vec<usize> {
        self.mask_rows().filter(|&i| self.rows[i].block == Some(block)).collect()
    }

    /// Distinct block tags in first-appearance order.
    pub fn blocks(&self) -> Vec<usize> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if let Some(b) = r.block {
                if !seen.contains(&b) {
                    seen.push(b);
                }
            }
        }
        seen
    }

    /// Column index of in-forward row `j`.
    pub fn row_col(&self, j: usize) -> usize {
        self.cache_len + j
    }

    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        self.visible[row * self.width() + col]
    }

    pub fn set_visible(&mut self, row: usize, col: usize, v: bool) {
        let w = self.width();
        self.visible[row * w + col] = v;
    }

    pub fn sees_row(&self, row: usize, other: usize) -> bool {
        self.is_visible(row, self.row_col(other))
    }

    /// Visible columns of `row`, ascending.
    pub fn visible_cols(&self, row: usize) -> Vec<usize> {
        let w = self.width();
        self.visible[row * w..(row + 1) * w]
            .iter()
            .enumerate()
            .filter_map(|(c, &v)| v.then_some(c))
            .collect()
    }

    pub fn visibility(&self) -> &[bool] {
        &self.visible
    }

    /// Moves the leading frozen rows into the cache, keeping only mask rows.
    ///
    /// Used by training: the clean sequence is forwarded once without masks, its
    /// KV becomes the cache, and the mask blocks are then run against it.
    pub fn fold_frozen_into_cache(&self) -> Result<AttentionLayout> {
        let n_frozen = self.n_frozen();
        if self.rows[..n_frozen].iter().any(|r| r.route != Route::Frozen) {
            return Err(Error::Layout("frozen rows must precede mask rows to fold them".into()));
        }
        let masks: Vec<RowSpec> = self.rows[n_frozen..].to_vec();
        let mut out = AttentionLayout::empty(self.cache_len + n_frozen, masks);
        for (new_i, old_i) in (n_frozen..self.rows.len()).enumerate() {
            // Column indices are unchanged: frozen row j becomes cache position
            // cache_len + j, and mask rows keep their offset past it.
            for c in self.visible_cols(old_i) {
                out.set_visible(new_i, c, true);
            }
        }
        Ok(out)
    }

    /// Text grid of the layout: one line per row, `#` visible and `.` hidden.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cache={} rows={}", self.cache_len, self.rows.len());
        for (i, r) in self.rows.iter().enumerate() {
            let route = match r.route {
                Route::Frozen => 'F',
                Route::Mask => 'M',
            };
            let block = r.block.map_or_else(|| "-".to_string(), |b| b.to_string());
            let _ = write!(s, "{i:>3} {:>4} {route} {block:>3} |", r.position);
            for c in 0..self.width() {
                if c == self.cache_len {
                    s.push('|');
                }
                s.push(if self.is_visible(i, c) { '#' } else { '.' });
            }
            if self.cache_len == self.width() {
                s.push('|');
            }
            s.push('\n');
        }
        s
    }

    fn causal_frozen(&mut self) {
        let frozen: Vec<usize> = self.frozen_rows().collect();
        for &i in &frozen {
            for c in 0..self.cache_len {
                self.set_visible(i, c, true);
            }
            for &j in &frozen {
                if self.rows[j].position <= self.rows[i].position {
                    let col = self.row_col(j);
                    self.set_visible(i, col, true);
                }
            }
        }
    }

    fn link_block(&mut self, rows: &[usize]) {
        for &i in rows {
            for &j in rows {
                let col = self.row_col(j);
                self.set_visible(i, col, true);
            }
        }
    }
}

/// Plain causal layout: `n` frozen rows at positions `cache_len..cache_len+n`.
pub fn build_causal_layout(cache_len: usize, n: usize) -> AttentionLayout {
    let rows = (0..n).map(|i| RowSpec::frozen(cache_len + i)).collect();
    let mut layout = AttentionLayout::empty(cache_len, rows);
    layout.causal_frozen();
    layout
}

/// Packed training layout over a clean sequence of `seq_len` tokens.
///
/// Each anchor `n` owns `block_slots` mask rows at positions `n+1..=n+M` that see
/// clean rows `0..=n` and each other. Targets `x[n+1..=n+M]` must exist, so
/// `n + M < seq_len`.
pub fn build_training_layout(seq_len: usize, anchors: &[usize], block_slots: usize) -> Result<AttentionLayout> {
    let mut seen = BTreeSet::new();
    for &a in anchors {
        if a + block_slots >= seq_len {
            return Err(Error::Layout(format!(
                "anchor {a} with {block_slots} slots runs past sequence length {seq_len}"
            )));
        }
        if !seen.insert(a) {
            return Err(Error::Layout(format!("duplicate anchor {a}")));
        }
    }
    let mut rows: Vec<RowSpec> = (0..seq_len).map(RowSpec::frozen).collect();
    for &a in anchors {
        rows.extend((1..=block_slots).map(|s| RowSpec::mask(a + s, a)));
    }
    let mut layout = AttentionLayout::empty(0, rows);
    layout.causal_frozen();
    for &a in anchors {
        let block = layout.block_rows(a);
        for &i in &block {
            for j in 0..=a {
                let col = layout.row_col(j);
                layout.set_visible(i, col, true);
            }
        }
        layout.link_block(&block);
    }
    Ok(layout)
}

/// Parallel draft-and-verify layout.
///
/// Frozen rows: the pending bonus at `cache_len` and drafts `d_1..d_k` after it.
/// Branch `r` in `kept` adds `M` mask rows at `cache_len+r+1..=cache_len+r+M`
/// that see the cache, the bonus row, `d_1..d_r`, and each other.
pub fn build_parallel_layout(
    cache_len: usize,
    k: usize,
    kept: &[usize],
    block_slots: usize,
) -> Result<AttentionLayout> {
    if k + 1 != block_slots {
        return Err(Error::Layout(format!("parallel drafts {k} must equal block_slots-1 = {}", block_slots - 1)));
    }
    if let Some(&bad) = kept.iter().find(|&&r| r > k) {
        return Err(Error::Layout(format!("branch {bad} exceeds draft length {k}")));
    }
    let kept: BTreeSet<usize> = kept.iter().copied().collect();
    let mut rows: Vec<RowSpec> = (0..=k).map(|i| RowSpec::frozen(cache_len + i)).collect();
    for &r in &kept {
        rows.extend((1..=block_slots).map(|s| RowSpec::mask(cache_len + r + s, r)));
    }
    let mut layout = AttentionLayout::empty(cache_len, rows);
    layout.causal_frozen();
    for &r in &kept {
        let block = layout.block_rows(r);
        for &i in &block {
            for c in 0..cache_len {
                layout.set_visible(i, c, true);
            }
            for j in 0..=r {
                let col = layout.row_col(j);
                layout.set_visible(i, col, true);
            }
        }
        layout.link_block(&block);
    }
    Ok(layout)
}

/// `n_frozen` causal rows after the cache followed by one mask block (tag 0)
/// that sees everything before it.
pub fn build_block_after(cache_len: usize, n_frozen: usize, block_slots: usize) -> AttentionLayout {
    let end = cache_len + n_frozen;
    let mut rows: Vec<RowSpec> = (cache_len..end).map(RowSpec::frozen).collect();
    rows.extend((0..block_slots).map(|s| RowSpec::mask(end + s, 0)));
    let mut layout = AttentionLayout::empty(cache_len, rows);
    layout.causal_frozen();
    let block = layout.block_rows(0);
    for &i in &block {
        for c in 0..end {
            layout.set_visible(i, c, true);
        }
    }
    layout.link_block(&block);
    layout
}

/// Sequential draft pass: the bonus (last committed token, position
/// `m_after-1`) as a full-depth row plus one block of `M` mask rows.
pub fn build_sequential_draft_layout(m_after: usize, block_slots: usize) -> Result<AttentionLayout> {
    if m_after == 0 {
        return Err(Error::Layout("sequential draft needs a committed bonus token".into()));
    }
    Ok(build_block_after(m_after - 1, 1, block_slots))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// Frozen rows must sit at contiguous positions right after the cache.
    FrozenOrder,
    /// Frozen row visibility differs from the causal set.
    NotCausal,
    /// A frozen row sees a mask row.
    FrozenSeesMask,
    MissingBlock,
    /// Mask rows of different blocks see each other.
    CrossBlock,
    /// A mask row does not see a member of its own block.
    BlockNotLinked,
    /// A mask row sees a token at or after its own position.
    FutureToken,
    /// A mask row's visible tokens are not a contiguous prefix.
    GappedPrefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub row: usize,
    /// Offending visibility column, when the violation concerns one.
    pub col: Option<usize>,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.col {
            Some(c) => write!(f, "{:?} at row {} column {}", self.kind, self.row, c),
            None => write!(f, "{:?} at row {}", self.kind, self.row),
        }
    }
}

/// Checks the layout invariants, reporting the first violation found.
pub fn validate_layout(layout: &AttentionLayout) -> std::result::Result<(), Violation> {
    let cache = layout.cache_len();
    let rows = layout.rows();
    let v = |kind, row, col| Err(Violation { kind, row, col });

    for (n, i) in layout.frozen_rows().enumerate() {
        if rows[i].position != cache + n {
            return v(ViolationKind::FrozenOrder, i, None);
        }
    }

    for (i, r) in rows.iter().enumerate() {
        match r.route {
            Route::Frozen => {
                for c in 0..layout.width() {
                    let seen = layout.is_visible(i, c);
                    if c < cache {
                        if !seen {
                            return v(ViolationKind::NotCausal, i, Some(c));
                        }
                        continue;
                    }
                    let other = &rows[c - cache];
                    if other.route == Route::Mask {
                        if seen {
                            return v(ViolationKind::FrozenSeesMask, i, Some(c));
                        }
                    } else if seen != (other.position <= r.position) {
                        return v(ViolationKind::NotCausal, i, Some(c));
                    }
                }
            }
            Route::Mask => {
                let Some(block) = r.block else {
                    return v(ViolationKind::MissingBlock, i, None);
                };
                // Positions of visible tokens (cache columns are positions 0..cache).
                let mut token_positions = Vec::new();
                for c in 0..layout.width() {
                    let seen = layout.is_visible(i, c);
                    if c < cache {
                        if seen {
                            token_positions.push(c);
                        }
                        continue;
                    }
                    let other = &rows[c - cache];
                    match other.route {
                        Route::Mask => {
                            let same = other.block == Some(block);
                            if same && !seen {
                                return v(ViolationKind::BlockNotLinked, i, Some(c));
                            }
                            if !same && seen {
                                return v(ViolationKind::CrossBlock, i, Some(c));
                            }
                        }
                        Route::Frozen => {
                            if seen {
                                if other.position >= r.position {
                                    return v(ViolationKind::FutureToken, i, Some(c));
                                }
                                token_positions.push(other.position);
                            }
                        }
                    }
                }
                token_positions.sort_unstable();
                if token_positions.iter().enumerate().any(|(k, &p)| p != k) {
                    return v(ViolationKind::GappedPrefix, i, None);
                }
            }
        }
    }
    Ok(())
}
