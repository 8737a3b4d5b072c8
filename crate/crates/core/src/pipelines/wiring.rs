use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lengthdecode::BucketTag;
use crate::seqcore::{TokenSequence, Vocabulary};

/// Default cap on assembled encoder inputs.
pub const MAX_SOURCE_TOKENS: usize = 512;

/// One input sequence in a wiring row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Atom {
    /// Ground-truth question.
    Q,
    /// Length-bucket indicator token.
    L,
    /// Document.
    D,
    /// Ground-truth summary.
    S,
    /// Generated summary.
    #[serde(rename = "S'")]
    SPrime,
    /// Generated question.
    #[serde(rename = "Q'")]
    QPrime,
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Atom::Q => "Q",
            Atom::L => "L",
            Atom::D => "D",
            Atom::S => "S",
            Atom::SPrime => "S'",
            Atom::QPrime => "Q'",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "D-S")]
    DS,
    #[serde(rename = "D-D")]
    DD,
    #[serde(rename = "D-SD")]
    DSD,
    #[serde(rename = "QD-D")]
    QDD,
    #[serde(rename = "D-S-DRIL")]
    DSDril,
    #[serde(rename = "D-S-RL")]
    DSRl,
    #[serde(rename = "QAGen2S")]
    QaGen2S,
    #[serde(rename = "CTRLSum")]
    CtrlSum,
    #[serde(rename = "QA-Transfer")]
    QaTransfer,
    #[serde(rename = "D-S-NewsQA")]
    DSNewsQa,
    #[serde(rename = "D-S-NQ")]
    DSNq,
}

impl Variant {
    /// The variants trained end to end on the generated dataset.
    pub const TRAINABLE: [Variant; 7] = [
        Variant::DS,
        Variant::DD,
        Variant::DSD,
        Variant::QDD,
        Variant::DSDril,
        Variant::DSRl,
        Variant::QaGen2S,
    ];

    /// Comparison rows whose components are trained elsewhere.
    pub const BASELINES: [Variant; 4] = [
        Variant::CtrlSum,
        Variant::QaTransfer,
        Variant::DSNewsQa,
        Variant::DSNq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DS => "D-S",
            Variant::DD => "D-D",
            Variant::DSD => "D-SD",
            Variant::QDD => "QD-D",
            Variant::DSDril => "D-S-DRIL",
            Variant::DSRl => "D-S-RL",
            Variant::QaGen2S => "QAGen2S",
            Variant::CtrlSum => "CTRLSum",
            Variant::QaTransfer => "QA-Transfer",
            Variant::DSNewsQa => "D-S-NewsQA",
            Variant::DSNq => "D-S-NQ",
        }
    }

    pub fn is_trainable(self) -> bool {
        Self::TRAINABLE.contains(&self)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_alphanumeric())
            .collect::<String>()
            .to_ascii_uppercase();
        Self::TRAINABLE
            .into_iter()
            .chain(Self::BASELINES)
            .find(|v| {
                v.name()
                    .chars()
                    .filter(|c| c.is_alphanumeric())
                    .collect::<String>()
                    .to_ascii_uppercase()
                    == key
            })
            .ok_or_else(|| Error::input(format!("unknown variant {s:?}")))
    }
}

/// What feeds one encoder or decoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Atoms concatenated in order. On a decoder side, several atoms are
    /// alternative targets (teacher-forced `S` and sampled `S'`).
    Atoms(Vec<Atom>),
    /// Trained outside this system; the text describes the data used.
    External(String),
}

impl Side {
    pub fn atoms(&self) -> Option<&[Atom]> {
        match self {
            Side::Atoms(a) => Some(a),
            Side::External(_) => None,
        }
    }

    pub fn contains(&self, atom: Atom) -> bool {
        self.atoms().is_some_and(|a| a.contains(&atom))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferOrder {
    /// Generate the answer, then the question from it.
    AnswerFirst,
    /// Generate the question, then answer it.
    QuestionFirst,
}

/// Encoder and decoder inputs of the answer-generation (AG) and
/// question-generation (QG) models, at training and at inference time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub variant: Variant,
    pub train_ag_enc: Side,
    pub train_ag_dec: Side,
    pub train_qg_enc: Side,
    pub train_qg_dec: Side,
    pub infer_ag_enc: Side,
    pub infer_ag_dec: Side,
    pub infer_qg_enc: Side,
    pub infer_qg_dec: Side,
    pub infer_order: InferOrder,
}

/// The wiring row for `variant`.
pub fn wiring_for(variant: Variant) -> PipelineSpec {
    use Atom::*;
    let a = |atoms: &[Atom]| Side::Atoms(atoms.to_vec());
    let ext = |s: &str| Side::External(s.to_string());
    let answer_first = |train_ag_enc: Side, train_ag_dec: Side, train_qg_enc: Side, infer_qg_enc: Side| {
        PipelineSpec {
            variant,
            train_ag_enc,
            train_ag_dec,
            train_qg_enc,
            train_qg_dec: a(&[Q]),
            infer_ag_enc: a(&[L, D]),
            infer_ag_dec: a(&[SPrime]),
            infer_qg_enc,
            infer_qg_dec: a(&[QPrime]),
            infer_order: InferOrder::AnswerFirst,
        }
    };
    let question_first = |train_ag_enc: Side, train_ag_dec: Side, infer_ag_enc: Side| PipelineSpec {
        variant,
        train_ag_enc,
        train_ag_dec,
        train_qg_enc: a(&[D]),
        train_qg_dec: a(&[Q]),
        infer_ag_enc,
        infer_ag_dec: a(&[SPrime]),
        infer_qg_enc: a(&[D]),
        infer_qg_dec: a(&[QPrime]),
        infer_order: InferOrder::QuestionFirst,
    };
    match variant {
        Variant::DS => answer_first(a(&[L, D]), a(&[S]), a(&[S]), a(&[SPrime])),
        // Training reads D into QG while inference reads S'; kept as listed.
        Variant::DD => answer_first(a(&[L, D]), a(&[S]), a(&[D]), a(&[SPrime])),
        Variant::DSD => answer_first(a(&[L, D]), a(&[S]), a(&[S, D]), a(&[SPrime, D])),
        Variant::DSDril | Variant::DSRl => {
            answer_first(a(&[L, D]), a(&[S, SPrime]), a(&[S]), a(&[SPrime]))
        }
        Variant::DSNewsQa => PipelineSpec {
            train_qg_dec: ext("Q in NewsQA"),
            ..answer_first(a(&[L, D]), a(&[S]), ext("D in NewsQA"), a(&[SPrime]))
        },
        Variant::DSNq => PipelineSpec {
            train_qg_dec: ext("Q in Natural Questions"),
            ..answer_first(
                a(&[L, D]),
                a(&[S]),
                ext("LA in Natural Questions"),
                a(&[SPrime]),
            )
        },
        Variant::QDD => question_first(a(&[Q, L, D]), a(&[S]), a(&[QPrime, L, D])),
        Variant::QaGen2S => question_first(a(&[D, Q]), a(&[S]), a(&[D, QPrime])),
        Variant::CtrlSum => question_first(
            ext("pretrained CTRLSum model"),
            ext("pretrained CTRLSum model"),
            a(&[QPrime, D]),
        ),
        Variant::QaTransfer => question_first(
            ext("Q + D in NewsQA"),
            ext("A in NewsQA"),
            a(&[QPrime, D]),
        ),
    }
}

/// Token sequences bound to atoms for one example.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bindings {
    pub q: Option<TokenSequence>,
    pub d: Option<TokenSequence>,
    pub s: Option<TokenSequence>,
    pub s_prime: Option<TokenSequence>,
    pub q_prime: Option<TokenSequence>,
    pub bucket: Option<BucketTag>,
}

impl Bindings {
    fn text(&self, atom: Atom) -> Option<&TokenSequence> {
        match atom {
            Atom::Q => self.q.as_ref(),
            Atom::D => self.d.as_ref(),
            Atom::S => self.s.as_ref(),
            Atom::SPrime => self.s_prime.as_ref(),
            Atom::QPrime => self.q_prime.as_ref(),
            Atom::L => None,
        }
    }
}

/// Concatenates the atoms of one encoder side. The bucket atom becomes its
/// indicator token; `</s>` separates consecutive text atoms but is never
/// placed next to the bucket token. The result keeps its first
/// `max_tokens` tokens.
pub fn assemble_input(
    atoms: &[Atom],
    bindings: &Bindings,
    vocab: &Vocabulary,
    max_tokens: usize,
) -> Result<TokenSequence> {
    let mut out = Vec::new();
    let mut prev_text = false;
    for &atom in atoms {
        if atom == Atom::L {
            let tag = bindings
                .bucket
                .ok_or_else(|| Error::input("atom L is not bound"))?;
            out.push(vocab.bucket_id(tag));
            prev_text = false;
            continue;
        }
        let seq = bindings
            .text(atom)
            .ok_or_else(|| Error::input(format!("atom {atom} is not bound")))?;
        if seq.is_empty() {
            continue;
        }
        if prev_text {
            out.push(vocab.sep_id());
        }
        out.extend_from_slice(seq);
        prev_text = true;
    }
    out.truncate(max_tokens);
    if out.is_empty() {
        return Err(Error::input("assembled input is empty"));
    }
    Ok(TokenSequence(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Atom::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_words(["a", "b", "x", "y"]).unwrap()
    }

    #[test]
    fn documented_rows() {
        let ds = wiring_for(Variant::DS);
        assert_eq!(ds.train_ag_enc, Side::Atoms(vec![L, D]));
        assert_eq!(ds.train_qg_enc, Side::Atoms(vec![S]));
        assert_eq!(ds.infer_qg_enc, Side::Atoms(vec![SPrime]));
        assert_eq!(ds.infer_order, InferOrder::AnswerFirst);
        let qdd = wiring_for(Variant::QDD);
        assert_eq!(qdd.infer_ag_enc, Side::Atoms(vec![QPrime, L, D]));
        assert_eq!(qdd.infer_qg_enc, Side::Atoms(vec![D]));
        assert_eq!(qdd.infer_order, InferOrder::QuestionFirst);
        let qa = wiring_for(Variant::QaGen2S);
        assert_eq!(qa.train_ag_enc, Side::Atoms(vec![D, Q]));
        assert_eq!(qa.infer_ag_enc, Side::Atoms(vec![D, QPrime]));
    }

    #[test]
    fn order_matches_generated_atoms() {
        for v in Variant::TRAINABLE.into_iter().chain(Variant::BASELINES) {
            let w = wiring_for(v);
            assert_eq!(
                w.infer_order == InferOrder::AnswerFirst,
                w.infer_qg_enc.contains(SPrime),
                "{v}"
            );
            assert_eq!(
                w.infer_order == InferOrder::QuestionFirst,
                w.infer_ag_enc.contains(QPrime),
                "{v}"
            );
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::TRAINABLE.into_iter().chain(Variant::BASELINES) {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(serde_json::from_str::<Variant>(&json).unwrap(), v);
        }
        assert_eq!("QAGen 2S".parse::<Variant>().unwrap(), Variant::QaGen2S);
        assert!("D-X".parse::<Variant>().is_err());
    }

    #[test]
    fn assembly_examples() {
        let v = vocab();
        let b = Bindings {
            d: Some(v.encode("a b")),
            s: Some(v.encode("x")),
            bucket: Some(BucketTag::Lb1),
            ..Default::default()
        };
        let lb1 = v.bucket_id(BucketTag::Lb1);
        assert_eq!(assemble_input(&[L, D], &b, &v, 512).unwrap().ids(), &[lb1, 7, 8]);
        let b2 = Bindings {
            s: Some(v.encode("x")),
            d: Some(v.encode("y")),
            ..Default::default()
        };
        assert_eq!(assemble_input(&[S, D], &b2, &v, 512).unwrap().ids(), &[9, 2, 10]);
        let long = Bindings {
            d: Some(TokenSequence(vec![7; 600])),
            bucket: Some(BucketTag::Lb0),
            ..Default::default()
        };
        let out = assemble_input(&[L, D], &long, &v, 512).unwrap();
        assert_eq!(out.len(), 512);
        assert_eq!(out[0], v.bucket_id(BucketTag::Lb0));
        assert!(assemble_input(&[Q], &b, &v, 512).is_err());
    }
}
