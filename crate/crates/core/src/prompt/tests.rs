// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use super::*;
use crate::tablegen::*;

fn ctx(layout: Layout) -> (EntityPool, PromptContext) {
    let pool = build_entity_pool(21, 40, 24).unwrap();
    let demo = Demo::build(&pool, 21).unwrap();
    let vocab = Vocab::build(&pool).unwrap();
    (
        pool,
        PromptContext {
            vocab,
            demo,
            layout,
            max_len: 4096,
        },
    )
}

fn md() -> Layout {
    Layout::default()
}

fn layouts() -> [Layout; 3] {
    [
        md(),
        Layout {
            format: Format::Csv,
            separator_row: false,
        },
        Layout {
            format: Format::Html,
            separator_row: false,
        },
    ]
}

fn tiny_table() -> Table {
    Table {
        col_headers: vec!["name".into(), "age".into()],
        row_headers: vec!["bob".into()],
        cells: vec![vec!["bob".into(), "seven".into()]],
        categories: vec![0, 1],
    }
}

fn tiny_vocab() -> Vocab {
    let mut words: Vec<String> = RESERVED.iter().chain(TEMPLATE_WORDS.iter()).map(|s| s.to_string()).collect();
    words.extend(["name", "age", "bob", "seven"].map(String::from));
    Vocab::from_words(words).unwrap()
}

#[test]
fn markdown_shape() {
    let v = tiny_vocab();
    let s = serialize(&v, &tiny_table(), md(), None).unwrap();
    assert_eq!(s.text(&v), "| name | age |\n| --- | --- |\n| bob | seven |\n");
    let no_sep = Layout {
        separator_row: false,
        ..md()
    };
    assert_eq!(serialize(&v, &tiny_table(), no_sep, None).unwrap().text(&v), "| name | age |\n| bob | seven |\n");
}

#[test]
fn csv_one_row_is_one_record() {
    let v = tiny_vocab();
    let csv = Layout {
        format: Format::Csv,
        separator_row: false,
    };
    let text = serialize(&v, &tiny_table(), csv, None).unwrap().text(&v);
    assert_eq!(text, "name , age\nbob , seven\n");
    let records: Vec<&str> = text.split_inclusive('\n').skip(1).collect();
    assert_eq!(records, vec!["bob , seven\n"]);
}

#[test]
fn html_td_count_matches_grid() {
    let (pool, c) = ctx(layouts()[2]);
    let mut rng = stream_rng(3, 0);
    for _ in 0..100 {
        let t = generate_table(&pool, &DimsRange::FULL, &[], &mut rng).unwrap();
        let s = serialize(&c.vocab, &t, c.layout, None).unwrap();
        let text = s.text(&c.vocab);
        assert_eq!(text.matches("<td>").count(), t.n_rows() * t.n_cols());
        assert_eq!(s.ids.iter().filter(|&&i| i == TD_OPEN).count(), t.n_rows() * t.n_cols());
    }
}

#[test]
fn tokenize_inverts_detokenize_on_prompts() {
    for layout in layouts() {
        let (pool, c) = ctx(layout);
        let mut rng = stream_rng(4, 0);
        for _ in 0..334 {
            let t = generate_table(&pool, &DimsRange::DESK, &c.demo.table.categories, &mut rng).unwrap();
            let q = make_query(&t, QueryKind::Atomic, 1, &mut rng).unwrap();
            let p = assemble_prompt(&c, &t, &q, None, None).unwrap();
            let text = c.vocab.detokenize(&p.token_ids);
            assert_eq!(c.vocab.tokenize(&text).unwrap(), p.token_ids);
        }
    }
}

#[test]
fn atomic_spans_resolve_to_expected_words() {
    let (pool, c) = ctx(md());
    let mut rng = stream_rng(5, 0);
    for i in 0..500 {
        let t = generate_table(&pool, &DimsRange::DESK, &c.demo.table.categories, &mut rng).unwrap();
        let q = make_query(&t, QueryKind::Atomic, 1, &mut rng).unwrap();
        let axis = if i % 2 == 0 { Axis::Column } else { Axis::Row };
        let cor = make_corruption(&t, &q, axis, &mut rng).unwrap();
        let p = assemble_prompt(&c, &t, &q, Some(&cor), None).unwrap();
        let word = |role, idx| {
            let r = p.expect_span(role, idx).unwrap();
            c.vocab.detokenize(&p.token_ids[r])
        };
        let (r, col) = (q.row(), q.col());
        assert_eq!(word(SpanRole::QueryRow, 0), t.row_headers[r]);
        assert_eq!(word(SpanRole::TableRow, 0), t.row_headers[r]);
        assert_eq!(word(SpanRole::QueryCol, 0), t.col_headers[col]);
        assert_eq!(word(SpanRole::TableCol, 0), t.col_headers[col]);
        assert_eq!(word(SpanRole::TargetCell, 0), t.value(r, col));
        assert_eq!(word(SpanRole::FoilCell, 0), cor.foil);
        let (r2, c2) = (cor.corrupt_query.row(), cor.corrupt_query.col());
        let foil_header = if axis == Axis::Column {
            &t.col_headers[c2]
        } else {
            &t.row_headers[r2]
        };
        assert_eq!(&word(SpanRole::FoilHeader, 0), foil_header);
        assert_eq!(c.vocab.detokenize(&p.answer_ids), t.value(r, col));
        // Spans are disjoint and inside the input.
        let mut ranges: Vec<_> = p.spans.values().cloned().collect();
        ranges.sort_by_key(|r| r.start);
        for w in ranges.windows(2) {
            assert!(w[0].end <= w[1].start);
        }
        assert!(ranges.last().unwrap().end <= p.answer_position);
        // Clean and corrupt prompts are position-aligned.
        let pc = assemble_prompt(&c, &t, &cor.corrupt_query, None, None).unwrap();
        assert_eq!(pc.answer_position, p.answer_position);
    }
}

#[test]
fn single_target_multicol_matches_atomic() {
    let (pool, c) = ctx(md());
    let mut rng = stream_rng(6, 0);
    let t = generate_table(&pool, &DimsRange::DESK, &c.demo.table.categories, &mut rng).unwrap();
    let atomic = QuerySpec::atomic(1, 2, 0);
    let multi = QuerySpec {
        kind: QueryKind::MultiCol,
        ..atomic.clone()
    };
    let a = assemble_prompt(&c, &t, &atomic, None, None).unwrap();
    let m = assemble_prompt(&c, &t, &multi, None, None).unwrap();
    assert_eq!(a.token_ids, m.token_ids);
}

#[test]
fn multicell_answers_are_comma_lists() {
    let (pool, c) = ctx(md());
    let mut rng = stream_rng(7, 0);
    let t = generate_table(&pool, &DimsRange::square(6, 6), &c.demo.table.categories, &mut rng).unwrap();
    let q = make_query(&t, QueryKind::MultiRow, 3, &mut rng).unwrap();
    let p = assemble_prompt(&c, &t, &q, None, None).unwrap();
    assert_eq!(p.answer_ids.len(), 5);
    assert_eq!(p.answer_ids[1], COMMA);
    for k in 0..3 {
        let r = p.expect_span(SpanRole::TargetCell, k).unwrap();
        assert_eq!(p.token_ids[r.start], p.answer_ids[2 * k]);
        assert!(p.span(SpanRole::QueryRow, k).is_some());
    }
}

#[test]
fn overlong_prompts_are_rejected() {
    let (pool, mut c) = ctx(md());
    let mut rng = stream_rng(8, 0);
    let t = generate_table(&pool, &DimsRange::DESK, &c.demo.table.categories, &mut rng).unwrap();
    let q = make_query(&t, QueryKind::Atomic, 1, &mut rng).unwrap();
    c.max_len = 20;
    assert!(matches!(assemble_prompt(&c, &t, &q, None, None), Err(crate::LabError::Prompt(_))));
}

#[test]
fn regions_tile_the_prompt() {
    let (pool, c) = ctx(md());
    let mut rng = stream_rng(9, 0);
    for i in 0..500 {
        let t = generate_table(&pool, &DimsRange::DESK, &c.demo.table.categories, &mut rng).unwrap();
        let q = make_query(&t, QueryKind::Atomic, 1, &mut rng).unwrap();
        let axis = if i % 2 == 0 { Axis::Column } else { Axis::Row };
        let cor = make_corruption(&t, &q, axis, &mut rng).unwrap();
        let p = assemble_prompt(&c, &t, &q, Some(&cor), None).unwrap();
        let m = segment_regions(&p).unwrap();
        assert_eq!(m.regions.len(), p.answer_position);
        assert_eq!(m.sizes().iter().sum::<usize>(), p.answer_position);
        assert!(m.regions.iter().all(|&r| (1..=15).contains(&r)));
        let words = |id| c.vocab.detokenize(&m.positions(id).iter().map(|&i| p.token_ids[i]).collect::<Vec<_>>());
        assert_eq!(words(10), t.value(q.row(), q.col()));
        assert_eq!(words(8), cor.foil);
        assert_eq!(words(12), t.col_headers[q.col()]);
        assert_eq!(words(14), t.row_headers[q.row()]);
        assert_eq!(*m.regions.last().unwrap(), 15);
        if axis == Axis::Column {
            assert_eq!(words(2), t.col_headers[cor.corrupt_query.col()]);
            assert_eq!(words(4), t.col_headers[q.col()]);
            // Column layout follows sequence order exactly.
            let mut firsts: Vec<(usize, u8)> = (1..=15u8).map(|id| (m.positions(id)[0], id)).collect();
            firsts.sort();
            let order: Vec<u8> = firsts.iter().map(|&(_, id)| id).collect();
            let headers = if cor.corrupt_query.col() < q.col() { [2, 3, 4] } else { [4, 3, 2] };
            assert_eq!(&order[1..4], &headers);
        }
    }
}

#[test]
fn regions_need_a_corruption() {
    let (pool, c) = ctx(md());
    let mut rng = stream_rng(10, 0);
    let t = generate_table(&pool, &DimsRange::DESK, &c.demo.table.categories, &mut rng).unwrap();
    let q = make_query(&t, QueryKind::Atomic, 1, &mut rng).unwrap();
    let p = assemble_prompt(&c, &t, &q, None, None).unwrap();
    assert!(segment_regions(&p).is_err());
}

/// Expected coordinates built straight from the table shape.
fn grid_oracle(t: &Table, layout: Layout) -> Vec<(i32, i32, TokenClass)> {
    use TokenClass::*;
    let mut out = Vec::new();
    let (nr, nc) = (t.n_rows() as i32, t.n_cols() as i32);
    let row = |out: &mut Vec<_>, r: i32, content: TokenClass| match layout.format {
        Format::Markdown => {
            out.push((r, -1, Other));
            for j in 0..nc {
                out.push((r, j, content));
                out.push((r, j, Delimiter));
            }
            out.push((r, -1, Other));
        }
        Format::Csv => {
            for j in 0..nc {
                if j > 0 {
                    out.push((r, j - 1, Delimiter));
                }
                out.push((r, j, content));
            }
            out.push((r, -1, Other));
        }
        Format::Html => {
            out.push((r, -1, Other));
            for j in 0..nc {
                out.push((r, j, Other));
                out.push((r, j, content));
                out.push((r, j, Delimiter));
            }
            out.push((r, -1, Other));
            out.push((r, -1, Other));
        }
    };
    row(&mut out, -1, Header);
    if layout.format == Format::Markdown && layout.separator_row {
        for _ in 0..(2 * nc + 2) {
            out.push((-1, -1, Other));
        }
    }
    for i in 0..nr {
        row(&mut out, i, Cell);
    }
    out
}

#[test]
fn scanned_coords_match_grid_oracle() {
    for layout in layouts() {
        let (pool, c) = ctx(layout);
        let mut rng = stream_rng(12, 0);
        for _ in 0..500 {
            let t = generate_table(&pool, &DimsRange::DESK, &c.demo.table.categories, &mut rng).unwrap();
            let q = make_query(&t, QueryKind::Atomic, 1, &mut rng).unwrap();
            let p = assemble_prompt(&c, &t, &q, None, None).unwrap();
            let got: Vec<_> = token_coords(&p).coords[p.table_range.clone()]
                .iter()
                .map(|c| (c.r_idx, c.c_idx, c.class))
                .collect();
            assert_eq!(got, grid_oracle(&t, layout), "{layout:?}");
            for (i, row) in p.cell_pos.iter().enumerate() {
                for (j, &pos) in row.iter().enumerate() {
                    let tc = token_coords(&p).coords[pos];
                    assert_eq!((tc.r_idx, tc.c_idx), (i as i32, j as i32));
                }
            }
        }
    }
}

#[test]
fn markdown_row_cells_count_from_zero() {
    let (pool, c) = ctx(md());
    let mut rng = stream_rng(13, 0);
    let t = generate_table(&pool, &DimsRange::square(4, 4), &c.demo.table.categories, &mut rng).unwrap();
    let q = QuerySpec::atomic(0, 1, 0);
    let p = assemble_prompt(&c, &t, &q, None, None).unwrap();
    let coords = token_coords(&p);
    let cells: Vec<i32> = coords.gridded(TokenClass::Cell).filter(|(_, c)| c.r_idx == 0).map(|(_, c)| c.c_idx).collect();
    assert_eq!(cells, vec![0, 1, 2, 3]);
    let sep_row_cells = coords.coords[p.table_range.clone()]
        .iter()
        .zip(&p.token_ids[p.table_range.clone()])
        .filter(|(_, &t)| t == DASH_RUN)
        .all(|(c, _)| c.class != TokenClass::Cell);
    assert!(sep_row_cells);
}

#[test]
fn cell_coordinate_multiset_is_format_invariant() {
    let mut rng = stream_rng(14, 0);
    let (pool, base) = ctx(md());
    for _ in 0..100 {
        let t = generate_table(&pool, &DimsRange::DESK, &base.demo.table.categories, &mut rng).unwrap();
        let q = make_query(&t, QueryKind::Atomic, 1, &mut rng).unwrap();
        let mut sets = Vec::new();
        for layout in layouts() {
            let c = PromptContext {
                layout,
                ..base.clone()
            };
            let p = assemble_prompt(&c, &t, &q, None, None).unwrap();
            let mut v: Vec<(i32, i32)> = token_coords(&p)
                .gridded(TokenClass::Cell)
                .map(|(_, c)| (c.r_idx, c.c_idx))
                .collect();
            v.sort();
            sets.push(v);
        }
        assert_eq!(sets[0], sets[1]);
        assert_eq!(sets[1], sets[2]);
    }
}

fn noisy(c: &PromptContext, t: &Table, q: &QuerySpec, kind: NoiseKind, placement: Placement, amount: usize) -> PromptInstance {
    let plan = inject_noise(t, q, NoiseSpec { kind, placement, amount }).unwrap();
    assemble_prompt(c, t, q, None, Some(&plan)).unwrap()
}

/// Column index of `word` on its line, recounted from the rendered text.
fn text_column(text: &str, word: &str, delim: &str) -> i32 {
    let line = text.lines().find(|l| l.split(' ').any(|w| w == word)).unwrap();
    let mut count = 0;
    for w in line.split(' ') {
        if w == word {
            return if delim == "|" { count - 1 } else { count };
        }
        if w == delim {
            count += 1;
        }
    }
    unreachable!()
}

#[test]
fn structural_noise_shifts_counted_column_and_filler_does_not() {
    for layout in &layouts()[..2] {
        let (pool, c) = ctx(*layout);
        let delim = if layout.format == Format::Markdown { "|" } else { "," };
        let mut rng = stream_rng(15, 0);
        for _ in 0..200 {
            let t = generate_table(&pool, &DimsRange::DESK, &c.demo.table.categories, &mut rng).unwrap();
            let q = make_query(&t, QueryKind::Atomic, 1, &mut rng).unwrap();
            let clean = assemble_prompt(&c, &t, &q, None, None).unwrap();
            let target = clean.expect_span(SpanRole::TargetCell, 0).unwrap().start;
            let base = token_coords(&clean).coords[target].c_idx;
            let gold = t.value(q.row(), q.col());
            for placement in [Placement::BeforeTarget, Placement::AfterTarget] {
                for kind in [NoiseKind::StructuralPipes, NoiseKind::LengthFiller] {
                    let p = noisy(&c, &t, &q, kind, placement, 2);
                    let pos = p.expect_span(SpanRole::TargetCell, 0).unwrap().start;
                    let scanned = token_coords(&p).coords[pos].c_idx;
                    let text = c.vocab.detokenize(&p.token_ids[p.table_range.clone()]);
                    assert_eq!(scanned, text_column(&text, gold, delim));
                    let expected = match (kind, placement) {
                        (NoiseKind::StructuralPipes, Placement::BeforeTarget) => base + 2,
                        _ => base,
                    };
                    assert_eq!(scanned, expected, "{kind:?} {placement:?}");
                    // Only the target row grows. A CSV row closed by noise gets a trailing comma.
                    let trailing = layout.format == Format::Csv
                        && placement == Placement::AfterTarget
                        && q.col() + 1 == t.n_cols();
                    assert_eq!(p.token_ids.len(), clean.token_ids.len() + 2 + usize::from(trailing));
                    let line_of = |p: &PromptInstance| {
                        let lines: Vec<String> = c.vocab.detokenize(&p.token_ids[p.table_range.clone()]).lines().map(String::from).collect();
                        lines
                    };
                    let (a, b) = (line_of(&clean), line_of(&p));
                    let diff: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
                    assert_eq!(diff.len(), 1);
                    assert!(b[diff[0]].contains(gold));
                }
            }
            let zero = noisy(&c, &t, &q, NoiseKind::StructuralPipes, Placement::BeforeTarget, 0);
            assert_eq!(zero.token_ids, clean.token_ids);
        }
    }
}

#[test]
fn html_noise_adds_empty_cells() {
    let (pool, c) = ctx(layouts()[2]);
    let mut rng = stream_rng(16, 0);
    let t = generate_table(&pool, &DimsRange::DESK, &c.demo.table.categories, &mut rng).unwrap();
    let q = make_query(&t, QueryKind::Atomic, 1, &mut rng).unwrap();
    let clean = assemble_prompt(&c, &t, &q, None, None).unwrap();
    let pos = clean.expect_span(SpanRole::TargetCell, 0).unwrap().start;
    let base = token_coords(&clean).coords[pos].c_idx;
    let p = noisy(&c, &t, &q, NoiseKind::StructuralPipes, Placement::BeforeTarget, 2);
    let pos = p.expect_span(SpanRole::TargetCell, 0).unwrap().start;
    assert_eq!(token_coords(&p).coords[pos].c_idx, base + 2);
    let f = noisy(&c, &t, &q, NoiseKind::LengthFiller, Placement::BeforeTarget, 2);
    assert_eq!(f.token_ids.len(), p.token_ids.len());
}

#[test]
fn dump_lists_everything() {
    let (pool, c) = ctx(md());
    let mut rng = stream_rng(17, 0);
    let t = generate_table(&pool, &DimsRange::DESK, &c.demo.table.categories, &mut rng).unwrap();
    let q = make_query(&t, QueryKind::Atomic, 1, &mut rng).unwrap();
    let cor = make_corruption(&t, &q, Axis::Column, &mut rng).unwrap();
    let p = assemble_prompt(&c, &t, &q, Some(&cor), None).unwrap();
    let d = p.dump(&c.vocab);
    assert_eq!(d["tokens"].as_array().unwrap().len(), p.token_ids.len());
    assert_eq!(d["regions"].as_array().unwrap().len(), p.answer_position);
    let names: HashMap<String, u64> = d["spans"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| (s["name"].as_str().unwrap().to_string(), s["start"].as_u64().unwrap()))
        .collect();
    assert!(names.contains_key("t_cell[0]"));
}
