//! OpenEA flat-file format: `rel_triples_1`, `rel_triples_2`, `ent_links`.
//!
//! One record per line, fields separated by a single TAB, UTF-8, no header.
//! Triple lines are `head_uri\trel_uri\ttail_uri`; link lines are
//! `source_uri\ttarget_uri`. Dense ids are assigned in first-seen order and
//! entity/relation names are the last URI path segment, percent-decoded.

use super::{
    extract_name, Entity, EntityId, GroundTruth, KgError, KgOptions, KgPair, KnowledgeGraph,
    Relation, RelationId, Triple,
};
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

/// What the loader dropped or normalized, for reporting.
#[derive(Clone, Copy, Debug, Default, serde::Serialize)]
pub struct LoadReport {
    pub source_duplicate_triples: usize,
    pub target_duplicate_triples: usize,
    pub duplicate_links: usize,
}

struct RawSide {
    entities: Vec<Entity>,
    relations: Vec<Relation>,
    triples: Vec<Triple>,
    entity_by_uri: HashMap<String, EntityId>,
}

fn read_file(dir: &Path, file: &str) -> Result<String, KgError> {
    let path = dir.join(file);
    if !path.is_file() {
        return Err(KgError::MissingFile(path.display().to_string()));
    }
    fs::read_to_string(&path).map_err(|source| KgError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_triples(dir: &Path, file: &str) -> Result<RawSide, KgError> {
    let text = read_file(dir, file)?;
    let mut side = RawSide {
        entities: Vec::new(),
        relations: Vec::new(),
        triples: Vec::new(),
        entity_by_uri: HashMap::new(),
    };
    let mut relation_by_uri: HashMap<String, RelationId> = HashMap::new();

    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(KgError::Malformed {
                file: file.to_string(),
                line: lineno + 1,
                reason: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        if fields.iter().any(|f| f.is_empty()) {
            return Err(KgError::Malformed {
                file: file.to_string(),
                line: lineno + 1,
                reason: "empty field".to_string(),
            });
        }
        let head = intern_entity(&mut side, fields[0]);
        let rel = *relation_by_uri
            .entry(fields[1].to_string())
            .or_insert_with(|| {
                let id = RelationId(side.relations.len() as u32);
                side.relations.push(Relation {
                    uri: fields[1].to_string(),
                    name: extract_name(fields[1]),
                    inverse_of: None,
                    reversed: false,
                });
                id
            });
        let tail = intern_entity(&mut side, fields[2]);
        side.triples.push(Triple::new(head, rel, tail));
    }
    Ok(side)
}

fn intern_entity(side: &mut RawSide, uri: &str) -> EntityId {
    if let Some(&id) = side.entity_by_uri.get(uri) {
        return id;
    }
    let id = EntityId(side.entities.len() as u32);
    side.entity_by_uri.insert(uri.to_string(), id);
    side.entities.push(Entity {
        uri: uri.to_string(),
        name: extract_name(uri),
    });
    id
}

/// Loads an OpenEA-format directory into an indexed [`KgPair`].
pub fn load_openea(
    dir: impl AsRef<Path>,
    options: KgOptions,
) -> Result<(KgPair, LoadReport), KgError> {
    let dir = dir.as_ref();
    let src = parse_triples(dir, "rel_triples_1")?;
    let tgt = parse_triples(dir, "rel_triples_2")?;

    let links_text = read_file(dir, "ent_links")?;
    let mut links = Vec::new();
    let mut seen_links = std::collections::HashSet::new();
    let mut duplicate_links = 0usize;
    for (lineno, line) in links_text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(KgError::Malformed {
                file: "ent_links".to_string(),
                line: lineno + 1,
                reason: format!("expected 2 tab-separated fields, got {}", fields.len()),
            });
        }
        let s = *src
            .entity_by_uri
            .get(fields[0])
            .ok_or_else(|| KgError::Malformed {
                file: "ent_links".to_string(),
                line: lineno + 1,
                reason: format!("source entity {} absent from rel_triples_1", fields[0]),
            })?;
        let t = *tgt
            .entity_by_uri
            .get(fields[1])
            .ok_or_else(|| KgError::Malformed {
                file: "ent_links".to_string(),
                line: lineno + 1,
                reason: format!("target entity {} absent from rel_triples_2", fields[1]),
            })?;
        if seen_links.insert((s, t)) {
            links.push((s, t));
        } else {
            duplicate_links += 1;
        }
    }
    let ground_truth = GroundTruth::new(links).map_err(|reason| KgError::Malformed {
        file: "ent_links".to_string(),
        line: 0,
        reason,
    })?;

    let (source, src_dups) =
        KnowledgeGraph::build(src.entities, src.relations, src.triples, options)?;
    let (target, tgt_dups) =
        KnowledgeGraph::build(tgt.entities, tgt.relations, tgt.triples, options)?;
    let pair = KgPair::new(source, target, Some(ground_truth))?;
    Ok((
        pair,
        LoadReport {
            source_duplicate_triples: src_dups,
            target_duplicate_triples: tgt_dups,
            duplicate_links,
        },
    ))
}

/// Writes a pair back to the OpenEA layout. Only forward triples are
/// serialized; reversed relations are an in-memory construct.
pub fn write_openea(pair: &KgPair, dir: impl AsRef<Path>) -> Result<(), KgError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| KgError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    write_triples(&pair.source, &dir.join("rel_triples_1"))?;
    write_triples(&pair.target, &dir.join("rel_triples_2"))?;

    let path = dir.join("ent_links");
    let mut out = Vec::new();
    if let Some(gt) = &pair.ground_truth {
        for &(s, t) in gt.pairs() {
            writeln!(
                out,
                "{}\t{}",
                pair.source.entity(s).unwrap().uri,
                pair.target.entity(t).unwrap().uri
            )
            .expect("in-memory write");
        }
    }
    fs::write(&path, out).map_err(|source| KgError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_triples(kg: &KnowledgeGraph, path: &Path) -> Result<(), KgError> {
    let mut out = Vec::new();
    for t in kg.forward_triples() {
        writeln!(
            out,
            "{}\t{}\t{}",
            kg.entity(t.head).unwrap().uri,
            kg.relation(t.relation).unwrap().uri,
            kg.entity(t.tail).unwrap().uri
        )
        .expect("in-memory write");
    }
    fs::write(path, out).map_err(|source| KgError::Io {
        path: path.display().to_string(),
        source,
    })
}
