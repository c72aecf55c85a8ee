//! Bundled workspace corpus, embedded at compile time.

use std::sync::Arc;

use crate::covering::Covering;
use crate::dsl::{parse_workspace, WorkspaceFile};
use crate::error::{Error, Result};
use crate::jet::PDESystem;

pub const CORPUS_NAMES: [&str; 6] = ["pavlov", "heavenly", "mas", "fk6d", "abc", "universal"];

/// Source text of a bundled corpus file (fixtures included).
pub fn source(name: &str) -> Option<&'static str> {
    Some(match name {
        "pavlov" => include_str!("../corpus/pavlov.its"),
        "heavenly" => include_str!("../corpus/heavenly.its"),
        "mas" => include_str!("../corpus/mas.its"),
        "fk6d" => include_str!("../corpus/fk6d.its"),
        "abc" => include_str!("../corpus/abc.its"),
        "universal" => include_str!("../corpus/universal.its"),
        "broken" => include_str!("../corpus/broken.its"),
        "pavlov_flipped" => include_str!("../corpus/pavlov_flipped.its"),
        "pavlov_badcov" => include_str!("../corpus/pavlov_badcov.its"),
        _ => return None,
    })
}

/// Load one of the six bundled systems by name.
pub fn load_corpus(name: &str) -> Result<WorkspaceFile> {
    if !CORPUS_NAMES.contains(&name) {
        return Err(Error::UnknownCorpus(name.to_string()));
    }
    parse_workspace(source(name).unwrap())
}

/// Load a fixture (planted-failure) workspace by name.
pub fn load_fixture(name: &str) -> Result<WorkspaceFile> {
    let src = source(name).ok_or_else(|| Error::UnknownCorpus(name.to_string()))?;
    parse_workspace(src)
}

pub fn load_system(name: &str) -> Result<Arc<PDESystem>> {
    Ok(load_corpus(name)?.system)
}

pub fn load_with_covering(name: &str) -> Result<(Arc<PDESystem>, Covering)> {
    let wf = load_corpus(name)?;
    Ok((wf.system, wf.covering))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_corpus_files_parse() {
        for name in CORPUS_NAMES {
            let wf = load_corpus(name).unwrap_or_else(|e| panic!("{}: {}", name, e));
            assert_eq!(wf.system.name, name);
        }
    }

    #[test]
    fn unknown_name_is_rejected() {
        assert!(matches!(
            load_corpus("nonesuch"),
            Err(Error::UnknownCorpus(_))
        ));
    }

    #[test]
    fn heavenly_has_constraint_rule() {
        let sys = load_system("heavenly").unwrap();
        assert_eq!(sys.const_rules.len(), 1);
    }

    #[test]
    fn fk6d_has_six_independents() {
        let sys = load_system("fk6d").unwrap();
        assert_eq!(sys.ws.independents.len(), 6);
    }

    #[test]
    fn broken_fixture_fails_with_position() {
        let e = load_fixture("broken").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 6, .. }), "{:?}", e);
    }
}
