//! Layout documents and the token map of the concatenated visual sequence.
//!
//! The sequence is the `T` video frames followed by one frame per condition
//! entity, each frame holding `H·W` tokens in row-major order. Entities are
//! ordered background/object first, then subject groups, each group led by
//! its face entity.

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest number of attribute entities a subject group may carry.
pub const MAX_ATTRIBUTES_PER_GROUP: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Background,
    Object,
    Face,
    Attribute,
}

impl EntityKind {
    pub fn is_subject(self) -> bool {
        matches!(self, EntityKind::Face | EntityKind::Attribute)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub kind: EntityKind,
    /// Declared subject-group ordinal; present exactly for face/attribute entities.
    pub group: Option<u32>,
    /// Caption tokens describing this entity, half-open.
    pub span: Option<Range<usize>>,
}

impl Entity {
    pub fn background() -> Self {
        Self {
            kind: EntityKind::Background,
            group: None,
            span: None,
        }
    }

    pub fn object() -> Self {
        Self {
            kind: EntityKind::Object,
            group: None,
            span: None,
        }
    }

    pub fn face(group: u32) -> Self {
        Self {
            kind: EntityKind::Face,
            group: Some(group),
            span: None,
        }
    }

    pub fn attribute(group: u32) -> Self {
        Self {
            kind: EntityKind::Attribute,
            group: Some(group),
            span: None,
        }
    }

    pub fn with_span(mut self, span: Range<usize>) -> Self {
        self.span = Some(span);
        self
    }

    fn span_contains(&self, t: usize) -> bool {
        self.span.as_ref().is_some_and(|s| s.contains(&t))
    }
}

/// Where an entity sits in the relational structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntityRole {
    /// Background or object entity with its ordinal among all such entities.
    Standalone { ordinal: usize },
    /// Member of subject group `group` (ordinal among groups); member 0 is the face.
    Subject { group: usize, member: usize },
}

/// Self-attention partition cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Video,
    /// One background/object entity, by ordinal.
    Standalone(usize),
    /// One whole subject group, by ordinal.
    Group(usize),
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Branch::Video => write!(f, "video"),
            Branch::Standalone(i) => write!(f, "entity:{i}"),
            Branch::Group(g) => write!(f, "group:{g}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Video,
    /// Condition frame of the entity with this index in `LayoutSpec::entities`.
    Condition(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenAddress {
    pub flat: usize,
    pub segment: Segment,
    /// Frame within the segment; condition entities have a single frame 0.
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

/// A validated layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutSpec {
    t: usize,
    h: usize,
    w: usize,
    text_len: usize,
    entities: Vec<Entity>,
    roles: Vec<EntityRole>,
    groups: Vec<Range<usize>>,
    n_standalone: usize,
    text_owner: Vec<Option<usize>>,
}

impl LayoutSpec {
    pub fn new(t: usize, h: usize, w: usize, text_len: usize, entities: Vec<Entity>) -> Result<Self> {
        for (name, v) in [("T", t), ("H", h), ("W", w)] {
            if v == 0 {
                return Err(Error::Invariant {
                    path: name.into(),
                    message: "must be at least 1".into(),
                });
            }
        }

        let mut roles = Vec::with_capacity(entities.len());
        let mut groups: Vec<Range<usize>> = Vec::new();
        let mut seen_groups: HashSet<u32> = HashSet::new();
        let mut current_group: Option<u32> = None;
        let mut n_standalone = 0;

        for (i, e) in entities.iter().enumerate() {
            let path = format!("entities[{i}]");
            match (e.kind.is_subject(), e.group) {
                (true, None) => {
                    return Err(Error::Schema {
                        path: format!("{path}.group"),
                        message: format!("{:?} entity requires a group ordinal", e.kind),
                    })
                }
                (false, Some(_)) => {
                    return Err(Error::Schema {
                        path: format!("{path}.group"),
                        message: format!("{:?} entity must not carry a group", e.kind),
                    })
                }
                _ => {}
            }

            if let Some(span) = &e.span {
                if span.start > span.end || span.end > text_len {
                    return Err(Error::Invariant {
                        path: format!("{path}.span"),
                        message: format!(
                            "span [{}, {}) does not lie within [0, {text_len})",
                            span.start, span.end
                        ),
                    });
                }
            }

            let Some(g) = e.group else {
                if !groups.is_empty() {
                    return Err(Error::Invariant {
                        path,
                        message: "background/object entities must precede all subject groups"
                            .into(),
                    });
                }
                roles.push(EntityRole::Standalone {
                    ordinal: n_standalone,
                });
                n_standalone += 1;
                continue;
            };

            if current_group != Some(g) {
                if !seen_groups.insert(g) {
                    return Err(Error::Invariant {
                        path: format!("{path}.group"),
                        message: format!("entities of group {g} must be contiguous"),
                    });
                }
                if e.kind != EntityKind::Face {
                    let has_face = entities[i..]
                        .iter()
                        .any(|o| o.group == Some(g) && o.kind == EntityKind::Face);
                    return Err(Error::Invariant {
                        path,
                        message: if has_face {
                            format!("group {g} must list its face first")
                        } else {
                            format!("group {g} has no face entity")
                        },
                    });
                }
                current_group = Some(g);
                groups.push(i..i + 1);
            } else {
                if e.kind == EntityKind::Face {
                    return Err(Error::Schema {
                        path: format!("{path}.kind"),
                        message: format!("group {g} already has a face"),
                    });
                }
                let run = groups.last_mut().expect("open group");
                run.end = i + 1;
                if run.len() - 1 > MAX_ATTRIBUTES_PER_GROUP {
                    return Err(Error::Invariant {
                        path,
                        message: format!(
                            "group {g} has more than {MAX_ATTRIBUTES_PER_GROUP} attributes"
                        ),
                    });
                }
            }
            let run = groups.last().expect("open group");
            roles.push(EntityRole::Subject {
                group: groups.len() - 1,
                member: i - run.start,
            });
        }

        let mut text_owner = vec![None; text_len];
        for (i, e) in entities.iter().enumerate() {
            for t in e.span.clone().unwrap_or(0..0) {
                if let Some(prev) = text_owner[t] {
                    return Err(Error::Invariant {
                        path: format!("entities[{i}].span"),
                        message: format!("overlaps the span of entities[{prev}] at token {t}"),
                    });
                }
                text_owner[t] = Some(i);
            }
        }

        Ok(Self {
            t,
            h,
            w,
            text_len,
            entities,
            roles,
            groups,
            n_standalone,
            text_owner,
        })
    }

    /// Video-only layout (no condition entities).
    pub fn video_only(t: usize, h: usize, w: usize, text_len: usize) -> Result<Self> {
        Self::new(t, h, w, text_len, Vec::new())
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn text_len(&self) -> usize {
        self.text_len
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn role(&self, entity: usize) -> EntityRole {
        self.roles[entity]
    }

    /// Entity index ranges of the subject groups, in order.
    pub fn groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// `N_c`.
    pub fn n_conditions(&self) -> usize {
        self.entities.len()
    }

    /// `N_{bg/obj}`.
    pub fn n_standalone(&self) -> usize {
        self.n_standalone
    }

    /// `N_{sub}`.
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_video_tokens(&self) -> usize {
        self.t * self.hw()
    }

    /// Length of the concatenated visual sequence, `(T + N_c)·H·W`.
    pub fn n_tokens(&self) -> usize {
        (self.t + self.entities.len()) * self.hw()
    }

    /// Number of `H·W` frames in the concatenated sequence.
    pub fn n_frames(&self) -> usize {
        self.t + self.entities.len()
    }

    /// Flat token range of condition entity `entity`.
    pub fn entity_tokens(&self, entity: usize) -> Range<usize> {
        let start = (self.t + entity) * self.hw();
        start..start + self.hw()
    }

    /// Entity owning a condition token, `None` for video tokens.
    pub fn entity_of(&self, flat: usize) -> Result<Option<usize>> {
        self.check_flat(flat)?;
        Ok(self.entity_of_unchecked(flat))
    }

    fn entity_of_unchecked(&self, flat: usize) -> Option<usize> {
        let frame = flat / self.hw();
        frame.checked_sub(self.t)
    }

    fn check_flat(&self, flat: usize) -> Result<()> {
        if flat >= self.n_tokens() {
            Err(Error::OutOfRange {
                index: flat,
                limit: self.n_tokens(),
            })
        } else {
            Ok(())
        }
    }

    pub fn address_of(&self, flat: usize) -> Result<TokenAddress> {
        self.check_flat(flat)?;
        let hw = self.hw();
        let frame = flat / hw;
        let within = flat % hw;
        let (segment, frame) = match frame.checked_sub(self.t) {
            None => (Segment::Video, frame),
            Some(e) => (Segment::Condition(e), 0),
        };
        Ok(TokenAddress {
            flat,
            segment,
            frame,
            row: within / self.w,
            col: within % self.w,
        })
    }

    /// Inverse of [`address_of`](Self::address_of); ignores `addr.flat`.
    pub fn flat_of(&self, addr: &TokenAddress) -> Result<usize> {
        if addr.row >= self.h {
            return Err(Error::OutOfRange {
                index: addr.row,
                limit: self.h,
            });
        }
        if addr.col >= self.w {
            return Err(Error::OutOfRange {
                index: addr.col,
                limit: self.w,
            });
        }
        let frame = match addr.segment {
            Segment::Video if addr.frame < self.t => addr.frame,
            Segment::Video => {
                return Err(Error::OutOfRange {
                    index: addr.frame,
                    limit: self.t,
                })
            }
            Segment::Condition(e) if e < self.entities.len() && addr.frame == 0 => self.t + e,
            Segment::Condition(e) => {
                return Err(Error::OutOfRange {
                    index: e,
                    limit: self.entities.len(),
                })
            }
        };
        Ok(frame * self.hw() + addr.row * self.w + addr.col)
    }

    pub fn branch_of_entity(&self, entity: usize) -> Branch {
        match self.roles[entity] {
            EntityRole::Standalone { ordinal } => Branch::Standalone(ordinal),
            EntityRole::Subject { group, .. } => Branch::Group(group),
        }
    }

    /// Self-attention branch of a token: a whole subject group is one branch.
    pub fn branch_of(&self, flat: usize) -> Result<Branch> {
        Ok(match self.entity_of(flat)? {
            None => Branch::Video,
            Some(e) => self.branch_of_entity(e),
        })
    }

    /// Contiguous token range of a condition branch, `None` for video.
    pub fn branch_tokens(&self, branch: Branch) -> Option<Range<usize>> {
        let entities = match branch {
            Branch::Video => return None,
            Branch::Standalone(i) => i..i + 1,
            Branch::Group(g) => self.groups[g].clone(),
        };
        Some(self.entity_tokens(entities.start).start..self.entity_tokens(entities.end - 1).end)
    }

    /// All condition branches in sequence order.
    pub fn condition_branches(&self) -> Vec<Branch> {
        (0..self.n_standalone)
            .map(Branch::Standalone)
            .chain((0..self.groups.len()).map(Branch::Group))
            .collect()
    }

    /// Entity whose span contains caption token `t`.
    pub fn text_owner(&self, t: usize) -> Option<usize> {
        self.text_owner.get(t).copied().flatten()
    }

    /// Cross-attention correlation level between a visual token and a caption token.
    pub fn text_level_of(&self, visual_flat: usize, text_idx: usize) -> Result<i8> {
        self.check_flat(visual_flat)?;
        if text_idx >= self.text_len {
            return Err(Error::OutOfRange {
                index: text_idx,
                limit: self.text_len,
            });
        }
        Ok(self.level_unchecked(self.entity_of_unchecked(visual_flat), text_idx))
    }

    pub(crate) fn level_unchecked(&self, visual_entity: Option<usize>, text_idx: usize) -> i8 {
        let (Some(v), Some(owner)) = (visual_entity, self.text_owner[text_idx]) else {
            return 0;
        };
        if v == owner {
            return 1;
        }
        match (self.roles[v], self.roles[owner]) {
            (EntityRole::Subject { group: a, .. }, EntityRole::Subject { group: b, .. }) => {
                if a == b {
                    1
                } else {
                    -1
                }
            }
            _ => 0,
        }
    }

    pub fn entity_span_contains(&self, entity: usize, t: usize) -> bool {
        self.entities[entity].span_contains(t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&LayoutDoc::from(self)).expect("layout serializes")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutDoc {
    #[serde(rename = "T")]
    t: u32,
    #[serde(rename = "H")]
    h: u32,
    #[serde(rename = "W")]
    w: u32,
    text_len: u32,
    entities: Vec<EntityDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntityDoc {
    kind: EntityKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    span: Option<[u32; 2]>,
}

impl From<&LayoutSpec> for LayoutDoc {
    fn from(spec: &LayoutSpec) -> Self {
        Self {
            t: spec.t as u32,
            h: spec.h as u32,
            w: spec.w as u32,
            text_len: spec.text_len as u32,
            entities: spec
                .entities
                .iter()
                .map(|e| EntityDoc {
                    kind: e.kind,
                    group: e.group,
                    span: e.span.as_ref().map(|s| [s.start as u32, s.end as u32]),
                })
                .collect(),
        }
    }
}

/// Parses and validates a JSON layout document.
pub fn parse_spec(text: &str) -> Result<LayoutSpec> {
    let mut de = serde_json::Deserializer::from_str(text);
    let doc: LayoutDoc = match serde_path_to_error::deserialize(&mut de) {
        Ok(doc) => doc,
        Err(err) => {
            let path = err.path().to_string();
            let inner = err.into_inner();
            return Err(match inner.classify() {
                serde_json::error::Category::Data => Error::Schema {
                    path,
                    message: strip_position(&inner),
                },
                _ => syntax(&inner),
            });
        }
    };
    de.end().map_err(|e| syntax(&e))?;
    let entities = doc
        .entities
        .into_iter()
        .map(|e| Entity {
            kind: e.kind,
            group: e.group,
            span: e.span.map(|[a, b]| a as usize..b as usize),
        })
        .collect();
    LayoutSpec::new(
        doc.t as usize,
        doc.h as usize,
        doc.w as usize,
        doc.text_len as usize,
        entities,
    )
}

fn syntax(err: &serde_json::Error) -> Error {
    Error::Syntax {
        line: err.line(),
        column: err.column(),
        message: strip_position(err),
    }
}

fn strip_position(err: &serde_json::Error) -> String {
    let full = err.to_string();
    match full.rfind(" at line ") {
        Some(idx) => full[..idx].to_string(),
        None => full,
    }
}
