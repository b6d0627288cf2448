//! Program text format.
//!
//! ```text
//! [SETUP]
//! R1 <- HHQR(A, NONE)
//! [ITER]
//! v1 <- MAT_VEC_MUL(A, x)
//! ```
//!
//! Blank lines and `#` comments are ignored when parsing. A comment of the
//! form `# env: LOGISTIC` selects the environment; otherwise it is inferred
//! from the opcodes used.

use super::ops::{Env, Opcode, StageKind};
use super::program::{Instruction, LegalityError, Operand, Program, Reg};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

pub fn serialize(p: &Program) -> String {
    let mut s = String::from("[SETUP]\n");
    for ins in &p.setup {
        s.push_str(&ins.to_string());
        s.push('\n');
    }
    s.push_str("[ITER]\n");
    for ins in &p.iter {
        s.push_str(&ins.to_string());
        s.push('\n');
    }
    s
}

fn parse_operand(tok: &str) -> Result<Operand, String> {
    if let Ok(r) = tok.parse::<Reg>() {
        return Ok(Operand::Reg(r));
    }
    match tok.parse::<f64>() {
        Ok(c) if c.is_finite() => Ok(Operand::Const(c)),
        _ => Err(format!("unknown register `{tok}`")),
    }
}

fn parse_instruction(line: &str) -> Result<Instruction, String> {
    let (lhs, rhs) = line
        .split_once("<-")
        .ok_or_else(|| "expected `target <- OPCODE(a, b)`".to_string())?;
    let target: Reg = lhs.trim().parse()?;
    let rhs = rhs.trim();
    let open = rhs.find('(').ok_or("missing `(`")?;
    let close = rhs.strip_suffix(')').ok_or("missing closing `)`")?;
    let op: Opcode = rhs[..open].trim().parse()?;
    let args: Vec<&str> = close[open + 1..].split(',').map(str::trim).collect();
    if args.len() != 2 {
        return Err(format!("expected two operands, found {}", args.len()));
    }
    let a = parse_operand(args[0])?;
    let b = if args[1] == "NONE" {
        None
    } else {
        Some(parse_operand(args[1])?)
    };
    Ok(Instruction { target, op, a, b })
}

/// Picks the smallest environment whose library covers every opcode.
pub fn infer_env(instrs: &[Instruction]) -> Env {
    if instrs.iter().any(|i| i.op == Opcode::VecNormalize) {
        Env::Eigen
    } else if instrs.iter().any(|i| !Env::Linear.has_op(i.op)) {
        Env::Logistic
    } else {
        Env::Linear
    }
}

/// Parses and type-checks a program. `env` overrides any `# env:` comment.
pub fn parse_program(text: &str, env: Option<Env>) -> Result<Program, ParseError> {
    let mut stage: Option<StageKind> = None;
    let mut seen_iter = false;
    let mut declared: Option<Env> = None;
    let mut setup = Vec::new();
    let mut iter = Vec::new();
    let mut setup_lines = Vec::new();
    let mut iter_lines = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(c) = line.strip_prefix('#') {
            if let Some(e) = c.trim().strip_prefix("env:") {
                declared = Some(e.trim().parse().map_err(|m| ParseError {
                    line: line_no,
                    message: m,
                })?);
            }
            continue;
        }
        let err = |message: String| ParseError {
            line: line_no,
            message,
        };
        match line {
            "[SETUP]" => {
                if stage.is_some() {
                    return Err(err("[SETUP] must come first and only once".into()));
                }
                stage = Some(StageKind::Setup);
            }
            "[ITER]" => {
                if seen_iter {
                    return Err(err("duplicate [ITER] header".into()));
                }
                seen_iter = true;
                stage = Some(StageKind::Iteration);
            }
            _ => {
                let ins = parse_instruction(line).map_err(err)?;
                match stage {
                    Some(StageKind::Setup) => {
                        setup.push(ins);
                        setup_lines.push(line_no);
                    }
                    Some(StageKind::Iteration) => {
                        iter.push(ins);
                        iter_lines.push(line_no);
                    }
                    None => return Err(err("instruction before any stage header".into())),
                }
            }
        }
    }
    let env = env.or(declared).unwrap_or_else(|| {
        let all: Vec<Instruction> = setup.iter().chain(&iter).copied().collect();
        infer_env(&all)
    });
    let p = Program { env, setup, iter };
    p.typecheck().map_err(|e| {
        let line = match &e {
            LegalityError::ReadOnlyTarget { loc, .. }
            | LegalityError::Unavailable { loc, .. }
            | LegalityError::TypeMismatch { loc, .. }
            | LegalityError::StageRestricted { loc, .. }
            | LegalityError::NotInLibrary { loc, .. }
            | LegalityError::TargetClass { loc, .. }
            | LegalityError::Arity { loc, .. } => match loc.stage {
                StageKind::Setup => setup_lines[loc.index],
                StageKind::Iteration => iter_lines[loc.index],
            },
            _ => iter_lines.last().copied().unwrap_or(0),
        };
        ParseError {
            line,
            message: e.to_string(),
        }
    })?;
    Ok(p)
}
