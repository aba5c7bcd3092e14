//! Restricted separation-logic formulas: an existential prefix over a
//! `*`-joined list of `ls` / `tree` / `none` atoms.
//!
//! Text form: `exists t1, t2 . ls(x, t1) * tree(t1) * none(y)`. A formula
//! without existentials drops the prefix. `NULL` is a keyword, not a
//! variable.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};

pub const NULL_NAME: &str = "NULL";

/// An atom argument: a named variable (program variable or existential) or
/// the null address.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Var(String),
    Null,
}

impl Term {
    pub fn var(name: &str) -> Term {
        Term::Var(name.to_string())
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Var(name) => write!(f, "{name}"),
            Term::Null => write!(f, "{NULL_NAME}"),
        }
    }
}

/// The three shape predicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PredKind {
    Ls,
    Tree,
    None,
}

impl PredKind {
    pub const ALL: [PredKind; 3] = [PredKind::Ls, PredKind::Tree, PredKind::None];

    /// Stable class index used by the predicate classifier.
    pub fn class_index(self) -> usize {
        match self {
            PredKind::Ls => 0,
            PredKind::Tree => 1,
            PredKind::None => 2,
        }
    }

    pub fn from_class(index: usize) -> Result<PredKind> {
        PredKind::ALL
            .into_iter()
            .find(|p| p.class_index() == index)
            .ok_or_else(|| Error::Config(format!("predicate class {index} out of range")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Atom {
    /// List segment from the first argument to the second.
    Ls(Term, Term),
    /// Binary tree rooted at the argument.
    Tree(Term),
    /// No data structure at the argument.
    None(Term),
}

impl Atom {
    pub fn kind(&self) -> PredKind {
        match self {
            Atom::Ls(..) => PredKind::Ls,
            Atom::Tree(..) => PredKind::Tree,
            Atom::None(..) => PredKind::None,
        }
    }

    /// The variable the atom describes (its first argument).
    pub fn root(&self) -> &Term {
        match self {
            Atom::Ls(a, _) | Atom::Tree(a) | Atom::None(a) => a,
        }
    }

    pub fn terms(&self) -> Vec<&Term> {
        match self {
            Atom::Ls(a, b) => vec![a, b],
            Atom::Tree(a) | Atom::None(a) => vec![a],
        }
    }

    fn rename(&self, from: &str, to: &str) -> Atom {
        let fix = |t: &Term| match t {
            Term::Var(v) if v == from => Term::var(to),
            other => other.clone(),
        };
        match self {
            Atom::Ls(a, b) => Atom::Ls(fix(a), fix(b)),
            Atom::Tree(a) => Atom::Tree(fix(a)),
            Atom::None(a) => Atom::None(fix(a)),
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::Ls(a, b) => write!(f, "ls({a}, {b})"),
            Atom::Tree(a) => write!(f, "tree({a})"),
            Atom::None(a) => write!(f, "none({a})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SepFormula {
    pub existentials: Vec<String>,
    pub atoms: Vec<Atom>,
}

impl SepFormula {
    pub fn new(existentials: Vec<String>, atoms: Vec<Atom>) -> SepFormula {
        SepFormula { existentials, atoms }
    }

    /// Variables that are not bound by the existential prefix.
    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for atom in &self.atoms {
            for term in atom.terms() {
                if let Term::Var(name) = term {
                    if !self.existentials.iter().any(|e| e == name) {
                        out.insert(name.clone());
                    }
                }
            }
        }
        out
    }

    /// Canonical form: existentials renamed `t1, t2, ...` and atoms sorted,
    /// minimizing the rendered text over all ways of assigning the canonical
    /// names. Two formulas are interchangeable exactly when their canonical
    /// forms are equal.
    pub fn canonicalize(&self) -> SepFormula {
        let free = self.free_vars();
        let mut fresh = Vec::new();
        let mut i = 1;
        while fresh.len() < self.existentials.len() {
            let name = format!("t{i}");
            if !free.contains(&name) {
                fresh.push(name);
            }
            i += 1;
        }

        let mut best: Option<(String, SepFormula)> = None;
        for perm in permutations(self.existentials.len()) {
            let mut atoms = self.atoms.clone();
            // two passes via placeholders so swaps cannot collide
            for (i, old) in self.existentials.iter().enumerate() {
                let hole = format!("\u{0}{i}");
                atoms = atoms.iter().map(|a| a.rename(old, &hole)).collect();
            }
            for (i, &slot) in perm.iter().enumerate() {
                let hole = format!("\u{0}{i}");
                atoms = atoms.iter().map(|a| a.rename(&hole, &fresh[slot])).collect();
            }
            atoms.sort();
            let candidate = SepFormula::new(fresh.clone(), atoms);
            let rendered = candidate.to_string();
            if best.as_ref().is_none_or(|(b, _)| rendered < *b) {
                best = Some((rendered, candidate));
            }
        }
        best.map(|(_, f)| f).unwrap_or_else(|| {
            let mut atoms = self.atoms.clone();
            atoms.sort();
            SepFormula::new(Vec::new(), atoms)
        })
    }

    pub fn equivalent(&self, other: &SepFormula) -> bool {
        self.canonicalize() == other.canonicalize()
    }
}

impl fmt::Display for SepFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.existentials.is_empty() {
            write!(f, "exists {} . ", self.existentials.join(", "))?;
        }
        if self.atoms.is_empty() {
            return write!(f, "emp");
        }
        let rendered: Vec<String> = self.atoms.iter().map(|a| a.to_string()).collect();
        write!(f, "{}", rendered.join(" * "))
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for slot in 0..n {
            let mut perm = Vec::with_capacity(n);
            perm.extend(rest.iter().map(|&x| if x >= slot { x + 1 } else { x }));
            perm.insert(0, slot);
            out.push(perm);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Parsing

pub fn parse_formula(text: &str) -> Result<SepFormula> {
    let text = text.trim();
    let bad = |msg: String| Error::Format(format!("formula {text:?}: {msg}"));

    let (existentials, body) = match text.strip_prefix("exists") {
        Some(rest) => {
            let (names, body) = rest
                .split_once('.')
                .ok_or_else(|| bad("missing `.` after exists".into()))?;
            let names: Vec<String> = names
                .split(',')
                .map(|n| n.trim().to_string())
                .filter(|n| !n.is_empty())
                .collect();
            if names.is_empty() {
                return Err(bad("empty existential list".into()));
            }
            (names, body)
        }
        None => (Vec::new(), text),
    };
    for name in &existentials {
        check_name(name).map_err(&bad)?;
        if existentials.iter().filter(|n| *n == name).count() > 1 {
            return Err(bad(format!("existential {name} bound twice")));
        }
    }

    let body = body.trim();
    if body == "emp" {
        return Ok(SepFormula::new(existentials, Vec::new()));
    }
    let mut atoms = Vec::new();
    for part in body.split('*') {
        let part = part.trim();
        let (head, rest) = part
            .split_once('(')
            .ok_or_else(|| bad(format!("atom {part:?} has no argument list")))?;
        let args = rest
            .strip_suffix(')')
            .ok_or_else(|| bad(format!("atom {part:?} missing `)`")))?;
        let args: Vec<Term> = args
            .split(',')
            .map(|a| {
                let a = a.trim();
                if a == NULL_NAME {
                    Ok(Term::Null)
                } else {
                    check_name(a).map_err(&bad)?;
                    Ok(Term::var(a))
                }
            })
            .collect::<Result<_>>()?;
        let atom = match (head.trim(), args.as_slice()) {
            ("ls", [a, b]) => Atom::Ls(a.clone(), b.clone()),
            ("tree", [a]) => Atom::Tree(a.clone()),
            ("none", [a]) => Atom::None(a.clone()),
            (name, args) => {
                return Err(bad(format!("unknown atom {name} with {} arguments", args.len())))
            }
        };
        atoms.push(atom);
    }
    Ok(SepFormula::new(existentials, atoms))
}

fn check_name(name: &str) -> std::result::Result<(), String> {
    if name.is_empty() {
        return Err("empty variable name".into());
    }
    if name == NULL_NAME {
        return Err(format!("{NULL_NAME} cannot be used as a variable"));
    }
    if !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(format!("bad variable name {name:?}"));
    }
    if name.starts_with(|c: char| c.is_ascii_digit()) {
        return Err(format!("variable name {name:?} starts with a digit"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parse_and_render_round_trip() {
        let text = "exists t1, t2 . ls(x, t1) * tree(t1) * none(y)";
        let f = parse_formula(text).unwrap();
        assert_eq!(f.existentials, vec!["t1", "t2"]);
        assert_eq!(f.atoms.len(), 3);
        assert_eq!(f.to_string(), text);
        assert_eq!(parse_formula(&f.to_string()).unwrap(), f);

        let plain = parse_formula("ls(x, NULL)").unwrap();
        assert!(plain.existentials.is_empty());
        assert_eq!(plain.atoms, vec![Atom::Ls(Term::var("x"), Term::Null)]);
    }

    #[test]
    fn malformed_formulas_are_rejected() {
        for bad in [
            "exists . ls(x, NULL)",
            "ls(x, NULL",
            "blob(x)",
            "ls(x)",
            "tree(x, y)",
            "ls(NULL, NULL) * none(1x)",
            "exists t, t . ls(x, t) * ls(t, t)",
            "exists NULL . ls(x, NULL)",
        ] {
            assert!(parse_formula(bad).is_err(), "{bad} should not parse");
        }
    }

    #[test]
    fn renamed_and_reordered_existentials_are_equivalent() {
        let a = parse_formula("exists t . ls(x, t) * ls(t, t)").unwrap();
        let b = parse_formula("exists u . ls(u, u) * ls(x, u)").unwrap();
        assert!(a.equivalent(&b));
        assert_eq!(a.canonicalize().to_string(), "exists t1 . ls(t1, t1) * ls(x, t1)");

        let c = parse_formula("ls(x, NULL)").unwrap();
        let d = parse_formula("tree(x)").unwrap();
        assert!(!c.equivalent(&d));
    }

    #[test]
    fn canonicalization_is_idempotent_and_dodges_free_name_clashes() {
        let f = parse_formula("exists a . ls(t1, a) * ls(a, NULL) * ls(x, t1)").unwrap();
        let canon = f.canonicalize();
        // t1 is free here, so the bound variable must pick the next name
        assert_eq!(canon.existentials, vec!["t2"]);
        assert_eq!(canon.canonicalize(), canon);
    }

    /// Ground-truth equivalence: try every bijection between the two
    /// existential lists and compare atom multisets.
    fn equivalent_by_search(a: &SepFormula, b: &SepFormula) -> bool {
        if a.existentials.len() != b.existentials.len() {
            return false;
        }
        let sorted = |f: &SepFormula| {
            let mut atoms = f.atoms.clone();
            atoms.sort();
            atoms
        };
        for perm in permutations(a.existentials.len()) {
            let mut renamed = a.atoms.clone();
            for (i, old) in a.existentials.iter().enumerate() {
                let hole = format!("\u{0}{i}");
                renamed = renamed.iter().map(|at| at.rename(old, &hole)).collect();
            }
            for (i, &slot) in perm.iter().enumerate() {
                let hole = format!("\u{0}{i}");
                renamed =
                    renamed.iter().map(|at| at.rename(&hole, &b.existentials[slot])).collect();
            }
            renamed.sort();
            if renamed == sorted(b) {
                return true;
            }
        }
        false
    }

    fn random_formula(rng: &mut ChaCha8Rng) -> SepFormula {
        let n_exist = rng.random_range(0..=2);
        let existentials: Vec<String> = (0..n_exist).map(|i| format!("e{i}")).collect();
        let mut names: Vec<Term> = vec![Term::var("x"), Term::var("y"), Term::Null];
        names.extend(existentials.iter().map(|e| Term::var(e)));
        let n_atoms = rng.random_range(1..=4);
        let atoms = (0..n_atoms)
            .map(|_| {
                let a = names[rng.random_range(0..names.len())].clone();
                let a = if a == Term::Null { Term::var("x") } else { a };
                match rng.random_range(0..3) {
                    0 => Atom::Ls(a, names[rng.random_range(0..names.len())].clone()),
                    1 => Atom::Tree(a),
                    _ => Atom::None(a),
                }
            })
            .collect();
        SepFormula::new(existentials, atoms)
    }

    #[test]
    fn canonical_equality_matches_bijection_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut agreements = 0;
        for _ in 0..300 {
            let a = random_formula(&mut rng);
            // mix equal-after-shuffle pairs with unrelated pairs
            let b = if rng.random_bool(0.5) {
                let mut shuffled = a.clone();
                // reverse atom order and existential names
                shuffled.atoms.reverse();
                for (i, old) in a.existentials.iter().enumerate().rev() {
                    let fresh = format!("r{i}");
                    shuffled.atoms =
                        shuffled.atoms.iter().map(|at| at.rename(old, &fresh)).collect();
                    shuffled.existentials[i] = fresh;
                }
                shuffled.existentials.reverse();
                shuffled
            } else {
                random_formula(&mut rng)
            };
            assert_eq!(a.equivalent(&b), equivalent_by_search(&a, &b), "{a} vs {b}");
            if a.equivalent(&b) {
                agreements += 1;
            }
        }
        assert!(agreements > 50, "want a healthy mix, got {agreements} equivalent pairs");
    }
}
