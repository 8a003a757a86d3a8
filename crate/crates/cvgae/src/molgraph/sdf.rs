//! V2000 molblock / SDF parsing.
//!
//! Records are `$$$$`-delimited. A record that fails to parse or fails the
//! structural admission rules is skipped with a reason; a bad record never
//! aborts the batch. Coordinates are echoed bit-faithfully from the file
//! text (parsed once as `f64`, never reformatted).

use super::{Atom, Bond, BondOrder, Conformation, MolecularGraph, RejectReason};

/// One accepted molblock.
#[derive(Clone, Debug)]
pub struct SdfRecord {
    pub title: String,
    pub graph: MolecularGraph,
    pub conformation: Conformation,
}

/// A skipped molblock with its position in the input and the reason.
#[derive(Clone, Debug)]
pub struct RecordReject {
    pub index: usize,
    pub title: String,
    pub reason: RejectReason,
}

#[derive(Debug, Default)]
pub struct SdfParse {
    pub records: Vec<SdfRecord>,
    pub rejects: Vec<RecordReject>,
}

/// Parse a concatenation of V2000 molblocks. Structural validation
/// (indices, counts, connectivity) happens here; heavy-atom and element
/// filters are applied separately by the ingestion pipeline.
pub fn parse_sdf(input: &str) -> SdfParse {
    let mut out = SdfParse::default();
    for (index, block) in split_records(input).into_iter().enumerate() {
        let title = block
            .first()
            .map(|l| l.trim().to_string())
            .unwrap_or_default();
        match parse_molblock(&block) {
            Ok((graph, conformation)) => {
                if !graph.is_connected() {
                    // mirrors removal of disconnected compounds (SMILES with `.`)
                    out.rejects.push(RecordReject {
                        index,
                        title,
                        reason: RejectReason::Disconnected,
                    });
                } else {
                    out.records.push(SdfRecord { title, graph, conformation });
                }
            }
            Err(reason) => out.rejects.push(RecordReject { index, title, reason }),
        }
    }
    out
}

/// Render one molecule as a V2000 molblock terminated by `$$$$`.
/// Coordinates are written at the format's fixed 4-decimal precision.
pub fn write_molblock(title: &str, graph: &MolecularGraph, conf: &Conformation) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(out, "{}", title);
    let _ = writeln!(out, "  cvgae");
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:>3}{:>3}  0  0  0  0  0  0  0  0999 V2000",
        graph.atom_count(),
        graph.bonds().len()
    );
    for (atom, c) in graph.atoms().iter().zip(conf.coords()) {
        let _ = writeln!(
            out,
            "{:>10.4}{:>10.4}{:>10.4} {:<3} 0  0  0  0  0  0  0  0  0  0  0  0",
            c[0], c[1], c[2], atom.element
        );
    }
    for b in graph.bonds() {
        let order = match b.order {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        };
        let _ = writeln!(out, "{:>3}{:>3}{:>3}  0  0  0  0", b.i + 1, b.j + 1, order);
    }
    let charged: Vec<(usize, i32)> = graph
        .atoms()
        .iter()
        .enumerate()
        .filter(|(_, a)| a.formal_charge != 0)
        .map(|(i, a)| (i + 1, a.formal_charge))
        .collect();
    for chunk in charged.chunks(8) {
        let mut line = format!("M  CHG{:>3}", chunk.len());
        for (idx, chg) in chunk {
            let _ = write!(line, " {:>3} {:>3}", idx, chg);
        }
        let _ = writeln!(out, "{}", line);
    }
    let _ = writeln!(out, "M  END");
    let _ = writeln!(out, "$$$$");
    out
}

fn split_records(input: &str) -> Vec<Vec<&str>> {
    let mut records = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in input.lines() {
        if line.trim_end() == "$$$$" {
            records.push(std::mem::take(&mut current));
        } else {
            current.push(line);
        }
    }
    if current.iter().any(|l| !l.trim().is_empty()) {
        records.push(current);
    }
    records
}

fn col(line: &str, range: std::ops::Range<usize>) -> &str {
    let end = range.end.min(line.len());
    if range.start >= end || !line.is_char_boundary(range.start) || !line.is_char_boundary(end) {
        ""
    } else {
        &line[range.start..end]
    }
}

fn parse_usize(s: &str, what: &str) -> Result<usize, RejectReason> {
    s.trim()
        .parse()
        .map_err(|_| RejectReason::Malformed(format!("bad {} field `{}`", what, s.trim())))
}

fn parse_coord(s: &str) -> Result<f64, RejectReason> {
    s.trim()
        .parse()
        .map_err(|_| RejectReason::Malformed(format!("bad coordinate `{}`", s.trim())))
}

/// Legacy atom-block charge codes.
fn charge_from_code(code: u32) -> Result<i32, RejectReason> {
    match code {
        0 => Ok(0),
        1 => Ok(3),
        2 => Ok(2),
        3 => Ok(1),
        4 => Ok(0), // doublet radical, not a charge
        5 => Ok(-1),
        6 => Ok(-2),
        7 => Ok(-3),
        other => Err(RejectReason::Malformed(format!("charge code {}", other))),
    }
}

fn parse_molblock(lines: &[&str]) -> Result<(MolecularGraph, Conformation), RejectReason> {
    if lines.len() < 4 {
        return Err(RejectReason::Malformed("truncated block: missing header".into()));
    }
    let counts = lines[3];
    if counts.to_ascii_uppercase().contains("V3000") {
        return Err(RejectReason::Malformed("V3000 blocks are not supported".into()));
    }
    let n_atoms = parse_usize(col(counts, 0..3), "atom count")?;
    let n_bonds = parse_usize(col(counts, 3..6), "bond count")?;
    if n_atoms == 0 {
        return Err(RejectReason::Malformed("counts line declares zero atoms".into()));
    }
    if lines.len() < 4 + n_atoms + n_bonds {
        return Err(RejectReason::Malformed(format!(
            "truncated block: counts declare {} atoms and {} bonds but only {} lines follow",
            n_atoms,
            n_bonds,
            lines.len() - 4
        )));
    }

    let mut atoms = Vec::with_capacity(n_atoms);
    let mut coords = Vec::with_capacity(n_atoms);
    for line in &lines[4..4 + n_atoms] {
        let x = parse_coord(col(line, 0..10))?;
        let y = parse_coord(col(line, 10..20))?;
        let z = parse_coord(col(line, 20..30))?;
        let symbol = col(line, 31..34).trim();
        if symbol.is_empty() {
            return Err(RejectReason::Malformed("missing element symbol".into()));
        }
        let charge_field = col(line, 36..39).trim();
        let code: u32 = if charge_field.is_empty() {
            0
        } else {
            charge_field
                .parse()
                .map_err(|_| RejectReason::Malformed(format!("charge field `{}`", charge_field)))?
        };
        atoms.push(Atom {
            element: symbol.to_string(),
            formal_charge: charge_from_code(code)?,
        });
        coords.push([x, y, z]);
    }

    let mut bonds = Vec::with_capacity(n_bonds);
    for line in &lines[4 + n_atoms..4 + n_atoms + n_bonds] {
        let a = parse_usize(col(line, 0..3), "bond atom")?;
        let b = parse_usize(col(line, 3..6), "bond atom")?;
        let t = parse_usize(col(line, 6..9), "bond type")? as u32;
        if a == 0 || b == 0 || a > n_atoms || b > n_atoms {
            return Err(RejectReason::Malformed(format!(
                "bond indices {} {} out of range 1..={}",
                a, b, n_atoms
            )));
        }
        let order = match t {
            1 => BondOrder::Single,
            2 => BondOrder::Double,
            3 => BondOrder::Triple,
            4 => BondOrder::Aromatic,
            other => return Err(RejectReason::UnsupportedBondType(other)),
        };
        bonds.push(Bond { i: a - 1, j: b - 1, order });
    }

    // property block: the first M CHG supersedes all atom-block charges
    let mut chg_seen = false;
    for line in &lines[4 + n_atoms + n_bonds..] {
        if line.starts_with("M  END") {
            break;
        }
        if line.starts_with("M  CHG") {
            if !chg_seen {
                for atom in &mut atoms {
                    atom.formal_charge = 0;
                }
                chg_seen = true;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            // "M CHG n a1 v1 a2 v2 ..."
            if fields.len() < 3 {
                return Err(RejectReason::Malformed("short M CHG line".into()));
            }
            let n: usize = fields[2]
                .parse()
                .map_err(|_| RejectReason::Malformed("bad M CHG count".into()))?;
            if fields.len() < 3 + 2 * n {
                return Err(RejectReason::Malformed("M CHG pair count mismatch".into()));
            }
            for k in 0..n {
                let atom_idx: usize = fields[3 + 2 * k]
                    .parse()
                    .map_err(|_| RejectReason::Malformed("bad M CHG atom index".into()))?;
                let value: i32 = fields[4 + 2 * k]
                    .parse()
                    .map_err(|_| RejectReason::Malformed("bad M CHG value".into()))?;
                if atom_idx == 0 || atom_idx > atoms.len() {
                    return Err(RejectReason::Malformed(format!(
                        "M CHG atom index {} out of range",
                        atom_idx
                    )));
                }
                atoms[atom_idx - 1].formal_charge = value;
            }
        }
    }

    let graph = MolecularGraph::new(atoms, bonds)
        .map_err(|e| RejectReason::Malformed(e.to_string()))?;
    let conformation = Conformation::new(coords)
        .map_err(|e| RejectReason::Malformed(e.to_string()))?;
    Ok((graph, conformation))
}
