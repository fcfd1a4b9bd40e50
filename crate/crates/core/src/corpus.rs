//! Built-in layouts used by the check suite, benchmarks and demos.

use crate::layout::{Entity, LayoutSpec};

/// Number of layouts in [`builtin_corpus`].
pub const CORPUS_SIZE: usize = 25;

const GRIDS: [(usize, usize); 5] = [(4, 4), (3, 5), (2, 3), (5, 4), (4, 6)];

/// Assigns caption spans in entity order, one filler token before each span.
/// Entities for which `skip` returns true get no span.
fn with_spans(entities: Vec<Entity>, skip: impl Fn(usize) -> bool) -> (Vec<Entity>, usize) {
    let mut cursor = 0;
    let entities = entities
        .into_iter()
        .enumerate()
        .map(|(e, ent)| {
            if skip(e) {
                return ent;
            }
            let start = cursor + 1;
            let end = start + 1 + e % 2;
            cursor = end;
            ent.with_span(start..end)
        })
        .collect();
    (entities, cursor + 2)
}

fn entities(background: bool, objects: usize, attributes: &[usize]) -> Vec<Entity> {
    let mut out = Vec::new();
    if background {
        out.push(Entity::background());
    }
    out.extend((0..objects).map(|_| Entity::object()));
    for (g, &n_attr) in attributes.iter().enumerate() {
        out.push(Entity::face(g as u32));
        out.extend((0..n_attr).map(|_| Entity::attribute(g as u32)));
    }
    out
}

/// 25 layouts covering 0–4 subject groups, 0–3 objects, with and without a
/// background, 0–3 attributes per group and several grid shapes.
pub fn builtin_corpus() -> Vec<(String, LayoutSpec)> {
    (0..CORPUS_SIZE)
        .map(|idx| {
            let groups = idx % 5;
            let objects = (idx / 5 + idx % 3) % 4;
            let background = (idx / 5 + idx) % 2 == 1;
            let attributes: Vec<usize> = (0..groups).map(|m| (idx + 2 * m) % 4).collect();
            let t = 1 + idx % 3;
            let (h, w) = GRIDS[(idx * 2) % GRIDS.len()];
            let (ents, text_len) =
                with_spans(entities(background, objects, &attributes), |e| (idx + e) % 5 == 4);
            let spec = LayoutSpec::new(t, h, w, text_len, ents).expect("corpus layout is valid");
            let name = format!(
                "corpus-{idx:02}-g{groups}-o{objects}-b{}",
                u8::from(background)
            );
            (name, spec)
        })
        .collect()
}

/// Two subject groups, one object and a background, on a small grid.
pub fn showcase_layout() -> LayoutSpec {
    let (ents, text_len) = with_spans(entities(true, 1, &[2, 1]), |_| false);
    LayoutSpec::new(2, 4, 4, text_len, ents).expect("valid layout")
}

/// Many condition branches on an 8×8 grid; the block-sparse kernel has the
/// most to skip here.
pub fn large_layout() -> LayoutSpec {
    let (ents, text_len) = with_spans(entities(true, 3, &[3, 3, 3, 3]), |_| false);
    LayoutSpec::new(2, 8, 8, text_len, ents).expect("valid layout")
}
