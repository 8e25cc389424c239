// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded synthetic tables, cell-location queries, counterfactual corruptions
//! and noise directives.
//!
//! Every entity is a single synthesized word. Categories have pairwise
//! disjoint value sets, so any cell value identifies exactly one
//! (row, column) position inside a table.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Headers allowed for the first (primary key) column.
pub const PRIMARY_KEY_NAMES: [&str; 3] = ["name", "role", "id"];

/// Number of natural-language question templates per query kind.
pub const QUERY_TEMPLATES: u8 = 3;

/// Stream id reserved for the one-shot demonstration table.
pub const DEMO_STREAM: u64 = u64::MAX;

/// Offset separating held-out stream ids from training stream ids.
pub const HELDOUT_STREAM_BASE: u64 = 1 << 40;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Deterministic RNG for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A named category with its value words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub values: Vec<String>,
}

/// All words a table can be built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityPool {
    pub categories: Vec<Category>,
    pub primary_key_names: Vec<String>,
}

fn syllable<R: Rng>(rng: &mut R, out: &mut String) {
    out.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
    out.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
}

fn fresh_word<R: Rng>(rng: &mut R, syllables: usize, taken: &mut HashSet<String>) -> String {
    loop {
        let mut w = String::with_capacity(syllables * 2);
        for _ in 0..syllables {
            syllable(rng, &mut w);
        }
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

/// Builds a pool of `n_categories` categories with `values_per_category`
/// values each. Category names are two-syllable words, values three-syllable
/// words; nothing collides with the primary key names.
pub fn build_entity_pool(
    seed: u64,
    n_categories: usize,
    values_per_category: usize,
) -> Result<EntityPool> {
    if n_categories < 2 {
        return Err(LabError::Pool(format!(
            "need at least 2 categories, got {n_categories}"
        )));
    }
    if values_per_category == 0 {
        return Err(LabError::Pool("values_per_category must be positive".into()));
    }
    let name_space = (CONSONANTS.len() * VOWELS.len()).pow(2);
    let value_space = (CONSONANTS.len() * VOWELS.len()).pow(3);
    // Keep well under the word space so rejection sampling terminates quickly.
    if n_categories * 2 > name_space || n_categories * values_per_category * 2 > value_space {
        return Err(LabError::Pool(format!(
            "{n_categories} x {values_per_category} disjoint values exceed the word space"
        )));
    }
    let mut rng = stream_rng(seed, 0);
    let mut taken: HashSet<String> = PRIMARY_KEY_NAMES.iter().map(|s| s.to_string()).collect();
    let categories = (0..n_categories)
        .map(|_| {
            let name = fresh_word(&mut rng, 2, &mut taken);
            let values = (0..values_per_category)
                .map(|_| fresh_word(&mut rng, 3, &mut taken))
                .collect();
            Category { name, values }
        })
        .collect();
    Ok(EntityPool {
        categories,
        primary_key_names: PRIMARY_KEY_NAMES.iter().map(|s| s.to_string()).collect(),
    })
}

impl EntityPool {
    /// Every word that can appear in a table.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.primary_key_names.iter().map(String::as_str).chain(
            self.categories
                .iter()
                .flat_map(|c| std::iter::once(c.name.as_str()).chain(c.values.iter().map(String::as_str))),
        )
    }
}

/// Inclusive ranges for the number of data rows and columns (key column included).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimsRange {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl DimsRange {
    pub const DESK: DimsRange = DimsRange { rows: (4, 6), cols: (4, 6) };
    pub const FULL: DimsRange = DimsRange { rows: (4, 20), cols: (4, 20) };

    pub fn square(lo: usize, hi: usize) -> Self {
        Self { rows: (lo, hi), cols: (lo, hi) }
    }

    fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (usize, usize)| lo >= 1 && lo <= hi;
        if !ok(self.rows) || !ok(self.cols) {
            return Err(LabError::config("dims", format!("malformed range {self:?}")));
        }
        Ok(())
    }
}

/// A grid whose first column holds the row headers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub col_headers: Vec<String>,
    pub row_headers: Vec<String>,
    /// `cells[i][j]`; `cells[i][0] == row_headers[i]`.
    pub cells: Vec<Vec<String>>,
    /// Pool category index behind each column (column 0: the key values).
    pub categories: Vec<usize>,
}

impl Table {
    pub fn n_rows(&self) -> usize {
        self.row_headers.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_headers.len()
    }

    pub fn value(&self, row: usize, col: usize) -> &str {
        &self.cells[row][col]
    }

    /// Position of a cell value, if present.
    pub fn locate(&self, word: &str) -> Option<(usize, usize)> {
        self.cells.iter().enumerate().find_map(|(i, row)| {
            row.iter().position(|v| v == word).map(|j| (i, j))
        })
    }

    /// Table invariants: consistent shapes, distinct headers, key column mirrors row headers.
    pub fn check(&self) -> Result<()> {
        let (r, c) = (self.n_rows(), self.n_cols());
        if r == 0 || c == 0 {
            return Err(LabError::Table("empty table".into()));
        }
        if self.cells.len() != r || self.cells.iter().any(|row| row.len() != c) {
            return Err(LabError::Table("ragged cell grid".into()));
        }
        if self.categories.len() != c {
            return Err(LabError::Table("category list length differs from columns".into()));
        }
        for (i, row) in self.cells.iter().enumerate() {
            if row[0] != self.row_headers[i] {
                return Err(LabError::Table(format!("row {i} key cell differs from its header")));
            }
        }
        let distinct = |xs: &[String]| xs.iter().collect::<HashSet<_>>().len() == xs.len();
        if !distinct(&self.row_headers) || !distinct(&self.col_headers) {
            return Err(LabError::Table("duplicate headers".into()));
        }
        Ok(())
    }
}

/// Samples a table. Categories listed in `exclude` are never used, which keeps
/// the demonstration table's words out of every other table.
pub fn generate_table<R: Rng>(
    pool: &EntityPool,
    dims: &DimsRange,
    exclude: &[usize],
    rng: &mut R,
) -> Result<Table> {
    dims.validate()?;
    let n_rows = rng.gen_range(dims.rows.0..=dims.rows.1);
    let n_cols = rng.gen_range(dims.cols.0..=dims.cols.1);
    let available: Vec<usize> = (0..pool.categories.len())
        .filter(|i| !exclude.contains(i))
        .collect();
    if available.len() < n_cols {
        return Err(LabError::Pool(format!(
            "{} usable categories cannot fill {n_cols} columns",
            available.len()
        )));
    }
    let categories: Vec<usize> = index::sample(rng, available.len(), n_cols)
        .into_iter()
        .map(|i| available[i])
        .collect();
    let mut columns = Vec::with_capacity(n_cols);
    for &cat in &categories {
        let values = &pool.categories[cat].values;
        if values.len() < n_rows {
            return Err(LabError::Pool(format!(
                "category `{}` has {} values, table needs {n_rows}",
                pool.categories[cat].name,
                values.len()
            )));
        }
        let picked: Vec<String> = index::sample(rng, values.len(), n_rows)
            .into_iter()
            .map(|i| values[i].clone())
            .collect();
        columns.push(picked);
    }
    let key_name = pool
        .primary_key_names
        .choose(rng)
        .cloned()
        .ok_or_else(|| LabError::Pool("no primary key names".into()))?;
    let mut col_headers = vec![key_name];
    col_headers.extend(categories[1..].iter().map(|&c| pool.categories[c].name.clone()));
    let cells: Vec<Vec<String>> = (0..n_rows)
        .map(|i| columns.iter().map(|col| col[i].clone()).collect())
        .collect();
    let table = Table {
        col_headers,
        row_headers: columns[0].clone(),
        cells,
        categories,
    };
    debug_assert!(table.check().is_ok());
    Ok(table)
}

/// Query shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Atomic,
    MultiRow,
    MultiCol,
}

/// Which cells a question asks for, by row and column index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub kind: QueryKind,
    pub row_targets: Vec<usize>,
    /// Never contains 0: the key column is not a queryable attribute.
    pub col_targets: Vec<usize>,
    pub template_id: u8,
}

impl QuerySpec {
    pub fn atomic(row: usize, col: usize, template_id: u8) -> Self {
        Self {
            kind: QueryKind::Atomic,
            row_targets: vec![row],
            col_targets: vec![col],
            template_id,
        }
    }

    /// Target cells in answer order: rows vary fastest for multi-row,
    /// columns for multi-column.
    pub fn targets(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for &r in &self.row_targets {
            for &c in &self.col_targets {
                out.push((r, c));
            }
        }
        out
    }

    pub fn row(&self) -> usize {
        self.row_targets[0]
    }

    pub fn col(&self) -> usize {
        self.col_targets[0]
    }

    pub fn check(&self, table: &Table) -> Result<()> {
        let (nr, nc) = (self.row_targets.len(), self.col_targets.len());
        let shape_ok = match self.kind {
            QueryKind::Atomic => nr == 1 && nc == 1,
            QueryKind::MultiRow => nr >= 1 && nc == 1,
            QueryKind::MultiCol => nr == 1 && nc >= 1,
        };
        if !shape_ok {
            return Err(LabError::Table(format!("{:?} query with {nr} rows, {nc} cols", self.kind)));
        }
        if self.row_targets.iter().any(|&r| r >= table.n_rows())
            || self.col_targets.iter().any(|&c| c == 0 || c >= table.n_cols())
        {
            return Err(LabError::Table("query target outside table".into()));
        }
        let distinct = |xs: &[usize]| xs.iter().collect::<HashSet<_>>().len() == xs.len();
        if !distinct(&self.row_targets) || !distinct(&self.col_targets) {
            return Err(LabError::Table("repeated query target".into()));
        }
        Ok(())
    }
}

/// Samples a question. `subset_size` is the number of rows (multi-row) or
/// columns (multi-column) asked for; it must be 1 for atomic queries.
pub fn make_query<R: Rng>(
    table: &Table,
    kind: QueryKind,
    subset_size: usize,
    rng: &mut R,
) -> Result<QuerySpec> {
    let n_attr = table.n_cols().saturating_sub(1);
    let (n_row_targets, n_col_targets) = match kind {
        QueryKind::Atomic if subset_size != 1 => {
            return Err(LabError::Table("atomic queries have subset size 1".into()))
        }
        QueryKind::Atomic => (1, 1),
        QueryKind::MultiRow => (subset_size, 1),
        QueryKind::MultiCol => (1, subset_size),
    };
    if subset_size == 0 || n_row_targets > table.n_rows() || n_col_targets > n_attr {
        return Err(LabError::Table(format!(
            "subset of {subset_size} does not fit a {}x{} table",
            table.n_rows(),
            table.n_cols()
        )));
    }
    let mut rows = index::sample(rng, table.n_rows(), n_row_targets).into_vec();
    let mut cols: Vec<usize> = index::sample(rng, n_attr, n_col_targets)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    // Lists are asked for in table order.
    rows.sort_unstable();
    cols.sort_unstable();
    let template_id = rng.gen_range(0..QUERY_TEMPLATES);
    Ok(QuerySpec {
        kind,
        row_targets: rows,
        col_targets: cols,
        template_id,
    })
}

/// Which query constraint a corruption replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Row,
    Column,
    Both,
}

/// A counterfactual query over the same table, with gold answer `gold`
/// (clean query) and foil `foil` (what the corrupt query asks for).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corruption {
    pub axis: Axis,
    pub corrupt_query: QuerySpec,
    pub gold: String,
    pub foil: String,
}

/// Replaces the row and/or column constraint of an atomic query with a
/// different header of the same table.
pub fn make_corruption<R: Rng>(
    table: &Table,
    query: &QuerySpec,
    axis: Axis,
    rng: &mut R,
) -> Result<Corruption> {
    if query.kind != QueryKind::Atomic {
        return Err(LabError::Table("corruptions are defined for atomic queries".into()));
    }
    query.check(table)?;
    let (r, c) = (query.row(), query.col());
    let other_row = |rng: &mut R| -> Result<usize> {
        let choices: Vec<usize> = (0..table.n_rows()).filter(|&i| i != r).collect();
        choices
            .choose(rng)
            .copied()
            .ok_or_else(|| LabError::Table("no counterfactual row header".into()))
    };
    let other_col = |rng: &mut R| -> Result<usize> {
        let choices: Vec<usize> = (1..table.n_cols()).filter(|&j| j != c).collect();
        choices
            .choose(rng)
            .copied()
            .ok_or_else(|| LabError::Table("no counterfactual column header".into()))
    };
    let (r2, c2) = match axis {
        Axis::Row => (other_row(rng)?, c),
        Axis::Column => (r, other_col(rng)?),
        Axis::Both => {
            let r2 = other_row(rng)?;
            (r2, other_col(rng)?)
        }
    };
    Ok(Corruption {
        axis,
        corrupt_query: QuerySpec::atomic(r2, c2, query.template_id),
        gold: table.value(r, c).to_string(),
        foil: table.value(r2, c2).to_string(),
    })
}

/// Kind of tokens inserted into the target row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Extra cell delimiters: false column boundaries.
    StructuralPipes,
    /// The same number of non-delimiter filler tokens.
    LengthFiller,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    BeforeTarget,
    AfterTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub placement: Placement,
    pub amount: usize,
}

/// Resolved insertion point for a noise spec: `amount` units go right before
/// (or right after) the cell at (`row`, `col`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub spec: NoiseSpec,
    pub row: usize,
    pub col: usize,
}

/// Resolves where the noise goes for the query's (first) target cell.
pub fn inject_noise(table: &Table, query: &QuerySpec, spec: NoiseSpec) -> Result<NoisePlan> {
    query.check(table)?;
    let (row, col) = (query.row(), query.col());
    if spec.placement == Placement::BeforeTarget && col == 0 {
        return Err(LabError::Table(
            "cannot insert before a key-column target without crossing the row start".into(),
        ));
    }
    Ok(NoisePlan { spec, row, col })
}

/// Swaps the values of two attribute columns, leaving headers in place.
/// The answer to a query on `a` becomes the value formerly in column `b`.
pub fn swap_columns(table: &Table, a: usize, b: usize) -> Result<Table> {
    if a == 0 || b == 0 || a == b || a >= table.n_cols() || b >= table.n_cols() {
        return Err(LabError::Table(format!("cannot swap columns {a} and {b}")));
    }
    let mut out = table.clone();
    for row in &mut out.cells {
        row.swap(a, b);
    }
    out.categories.swap(a, b);
    Ok(out)
}

/// Swaps the attribute values of two rows, leaving row headers in place.
pub fn swap_rows(table: &Table, a: usize, b: usize) -> Result<Table> {
    if a == b || a >= table.n_rows() || b >= table.n_rows() {
        return Err(LabError::Table(format!("cannot swap rows {a} and {b}")));
    }
    let mut out = table.clone();
    for j in 1..table.n_cols() {
        let tmp = out.cells[a][j].clone();
        out.cells[a][j] = out.cells[b][j].clone();
        out.cells[b][j] = tmp;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

/// One line of the dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Stream id the sample was drawn from.
    pub id: u64,
    pub table: Table,
    pub query: QuerySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<Corruption>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    pub seed: u64,
    pub split: Split,
}

impl Sample {
    /// RNG for analysis-time randomness tied to this sample; `salt` separates uses.
    pub fn rng(&self, salt: u64) -> ChaCha8Rng {
        stream_rng(self.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15), self.id)
    }

    pub fn gold(&self) -> Vec<&str> {
        self.query
            .targets()
            .into_iter()
            .map(|(r, c)| self.table.value(r, c))
            .collect()
    }
}

/// Dataset generation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_categories: usize,
    pub values_per_category: usize,
    pub dims: DimsRange,
    pub n_train: usize,
    pub n_heldout: usize,
    /// Fraction of training samples asking for several cells.
    pub multicell_fraction: f64,
    /// Inclusive range of subset sizes for multi-cell samples.
    pub multicell_subset: (usize, usize),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_categories: 83,
            values_per_category: 16,
            dims: DimsRange::DESK,
            n_train: 20_000,
            n_heldout: 500,
            multicell_fraction: 0.2,
            multicell_subset: (2, 3),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.values_per_category < self.dims.rows.1 {
            return Err(LabError::config(
                "dataset.values_per_category",
                "must be at least the maximum number of rows",
            ));
        }
        if !(0.0..=1.0).contains(&self.multicell_fraction) {
            return Err(LabError::config("dataset.multicell_fraction", "must lie in [0, 1]"));
        }
        let (lo, hi) = self.multicell_subset;
        if lo < 1 || lo > hi {
            return Err(LabError::config("dataset.multicell_subset", "malformed range"));
        }
        if self.n_heldout == 0 {
            return Err(LabError::config("dataset.n_heldout", "must be positive"));
        }
        Ok(())
    }
}

/// The fixed demonstration: a minimum-size table from a reserved stream, with
/// one question per query kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demo {
    pub table: Table,
    pub atomic: QuerySpec,
    pub multi_row: QuerySpec,
    pub multi_col: QuerySpec,
}

impl Demo {
    pub fn build(pool: &EntityPool, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, DEMO_STREAM);
        let dims = DimsRange::square(4, 4);
        let table = generate_table(pool, &dims, &[], &mut rng)?;
        let mut atomic = make_query(&table, QueryKind::Atomic, 1, &mut rng)?;
        let mut multi_row = make_query(&table, QueryKind::MultiRow, 2, &mut rng)?;
        let mut multi_col = make_query(&table, QueryKind::MultiCol, 2, &mut rng)?;
        for q in [&mut atomic, &mut multi_row, &mut multi_col] {
            q.template_id = 0;
        }
        Ok(Self {
            table,
            atomic,
            multi_row,
            multi_col,
        })
    }

    pub fn query(&self, kind: QueryKind) -> &QuerySpec {
        match kind {
            QueryKind::Atomic => &self.atomic,
            QueryKind::MultiRow => &self.multi_row,
            QueryKind::MultiCol => &self.multi_col,
        }
    }
}

/// Pool, demonstration and samples generated from one seed.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub pool: EntityPool,
    pub demo: Demo,
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn generate(seed: u64, cfg: &DatasetConfig) -> Result<Self> {
        cfg.validate()?;
        let pool = build_entity_pool(seed, cfg.n_categories, cfg.values_per_category)?;
        let demo = Demo::build(&pool, seed)?;
        let mut samples = Vec::with_capacity(cfg.n_train + cfg.n_heldout);
        for i in 0..cfg.n_train as u64 {
            samples.push(draw_sample(&pool, &demo, cfg, seed, i, Split::Train)?);
        }
        for j in 0..cfg.n_heldout as u64 {
            samples.push(draw_sample(
                &pool,
                &demo,
                cfg,
                seed,
                HELDOUT_STREAM_BASE + j,
                Split::Heldout,
            )?);
        }
        Ok(Self { pool, demo, samples })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

/// Draws sample `stream` deterministically. Held-out samples are always atomic
/// and carry a column-axis corruption; training samples are multi-cell with
/// probability `multicell_fraction`.
pub fn draw_sample(
    pool: &EntityPool,
    demo: &Demo,
    cfg: &DatasetConfig,
    seed: u64,
    stream: u64,
    split: Split,
) -> Result<Sample> {
    let mut rng = stream_rng(seed, stream);
    let table = generate_table(pool, &cfg.dims, &demo.table.categories, &mut rng)?;
    let multicell = split == Split::Train && rng.gen_bool(cfg.multicell_fraction);
    let query = if multicell {
        let kind = if rng.gen_bool(0.5) {
            QueryKind::MultiRow
        } else {
            QueryKind::MultiCol
        };
        let limit = match kind {
            QueryKind::MultiRow => table.n_rows(),
            _ => table.n_cols() - 1,
        };
        let hi = cfg.multicell_subset.1.min(limit);
        let lo = cfg.multicell_subset.0.min(hi);
        let size = rng.gen_range(lo..=hi);
        make_query(&table, kind, size, &mut rng)?
    } else {
        make_query(&table, QueryKind::Atomic, 1, &mut rng)?
    };
    let corruption = if query.kind == QueryKind::Atomic && table.n_cols() > 2 {
        Some(make_corruption(&table, &query, Axis::Column, &mut rng)?)
    } else {
        None
    };
    Ok(Sample {
        id: stream,
        table,
        query,
        corruption,
        noise: None,
        seed,
        split,
    })
}

/// Re-asks a held-out table with a different query kind ("same tables,
/// different questions").
pub fn requery(sample: &Sample, kind: QueryKind, subset_size: usize) -> Result<Sample> {
    let mut rng = sample.rng(0x5EED_0000 + kind as u64);
    let query = make_query(&sample.table, kind, subset_size, &mut rng)?;
    Ok(Sample {
        query,
        corruption: None,
        noise: None,
        ..sample.clone()
    })
}
