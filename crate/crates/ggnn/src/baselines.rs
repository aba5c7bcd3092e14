//! Token-sequence baselines: a tanh RNN and an LSTM read the tokenized
//! story left to right and classify each answer position. Prediction starts
//! at the `ans` marker; for every further answer position the marker is fed
//! again as input (model outputs are never fed back).

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{tokenize_for_rnn, Interner, StoryVocab, SymbolicInstance};
use crate::output::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::TrainableModel;

/// Reserved token for anything missing from the training vocabulary.
pub const UNK: &str = "<unk>";

const ANS: &str = "ans";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Rnn,
    Lstm,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Rnn => "rnn",
            CellKind::Lstm => "lstm",
        }
    }

    pub fn from_name(name: &str) -> Result<CellKind> {
        match name {
            "rnn" => Ok(CellKind::Rnn),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::Config(format!("unknown baseline cell {other:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Vocabulary and instances

fn ans_position(seq: &[String]) -> Result<usize> {
    seq.iter()
        .position(|t| t == ANS)
        .ok_or_else(|| Error::Format("token sequence has no `ans` marker".into()))
}

/// Input-token and answer-class vocabularies, built from the training split
/// only. Id 1 is the reserved unknown in both.
#[derive(Debug, Clone)]
pub struct BaselineVocab {
    pub tokens: Interner,
    pub classes: Interner,
}

impl BaselineVocab {
    pub fn build(seqs: &[Vec<String>]) -> Result<Self> {
        let mut tokens = Interner::new();
        tokens.intern(UNK);
        let mut classes = Interner::new();
        classes.intern(UNK);
        for seq in seqs {
            let cut = ans_position(seq)?;
            for t in &seq[..=cut] {
                tokens.intern(t);
            }
            for t in &seq[cut + 1..] {
                classes.intern(t);
            }
        }
        Ok(BaselineVocab { tokens, classes })
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

/// One classification example: the input ids end with the `ans` marker, and
/// each target is a 0-based class index.
#[derive(Debug, Clone)]
pub struct TokenInstance {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// False when some answer token was not in the training vocabulary; the
    /// instance then never counts as correct.
    pub answer_known: bool,
}

pub fn token_instance(seq: &[String], vocab: &BaselineVocab) -> Result<TokenInstance> {
    let cut = ans_position(seq)?;
    if cut + 1 == seq.len() {
        return Err(Error::Format("token sequence has no answer positions".into()));
    }
    let unk_token = vocab.tokens.get(UNK).expect("built with the reserved token");
    let unk_class = vocab.classes.get(UNK).expect("built with the reserved token");
    let inputs = seq[..=cut]
        .iter()
        .map(|t| vocab.tokens.get(t).unwrap_or(unk_token))
        .collect();
    let mut answer_known = true;
    let targets = seq[cut + 1..]
        .iter()
        .map(|t| match vocab.classes.get(t) {
            Some(id) => id - 1,
            None => {
                answer_known = false;
                unk_class - 1
            }
        })
        .collect();
    Ok(TokenInstance { inputs, targets, answer_known })
}

/// Token sequences for every question of every story.
pub fn tokenize_questions(
    insts: &[SymbolicInstance],
    vocab: &StoryVocab,
) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::new();
    for inst in insts {
        for q in 0..inst.questions.len() {
            out.push(tokenize_for_rnn(inst, q, vocab)?);
        }
    }
    Ok(out)
}

pub fn token_instances(
    seqs: &[Vec<String>],
    vocab: &BaselineVocab,
) -> Result<Vec<TokenInstance>> {
    seqs.iter().map(|s| token_instance(s, vocab)).collect()
}

// ---------------------------------------------------------------------------
// Models

#[derive(Debug, Clone)]
pub struct BaselineConfig {
    pub kind: CellKind,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_tokens: usize,
    pub num_classes: usize,
}

impl BaselineConfig {
    pub fn new(kind: CellKind, vocab: &BaselineVocab) -> Self {
        BaselineConfig {
            kind,
            embed_dim: 50,
            hidden_dim: 50,
            num_tokens: vocab.num_tokens(),
            num_classes: vocab.num_classes(),
        }
    }
}

struct Gate {
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
}

impl Gate {
    fn build(
        store: &mut ParamStore,
        name: &str,
        e: usize,
        h: usize,
        rng: Option<&mut impl Rng>,
    ) -> Gate {
        let (w_x, w_h) = match rng {
            Some(rng) => (
                Tensor::uniform(e, h, 1.0 / (e as f64).sqrt(), rng),
                Tensor::uniform(h, h, 1.0 / (h as f64).sqrt(), rng),
            ),
            None => (Tensor::zeros(e, h), Tensor::zeros(h, h)),
        };
        Gate {
            w_x: store.add(&format!("{name}.w_x"), w_x),
            w_h: store.add(&format!("{name}.w_h"), w_h),
            b: store.add(&format!("{name}.b"), Tensor::zeros(1, h)),
        }
    }

    /// x·Wx + h·Wh + b (pre-activation).
    fn pre(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let w_x = tape.param(store, self.w_x)?;
        let w_h = tape.param(store, self.w_h)?;
        let b = tape.param(store, self.b)?;
        let xw = tape.matmul(x, w_x)?;
        let hw = tape.matmul(h, w_h)?;
        let s = tape.add(xw, hw)?;
        tape.add(s, b)
    }

    fn num_scalars(&self, e: usize, h: usize) -> usize {
        e * h + h * h + h
    }
}

enum Cell {
    Rnn(Gate),
    Lstm { input: Gate, forget: Gate, output: Gate, cand: Gate },
}

pub struct BaselineModel {
    config: BaselineConfig,
    embed: ParamId,
    cell: Cell,
    classifier: Linear,
}

impl BaselineModel {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        config: BaselineConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::assemble(store, prefix, config, Some(rng))
    }

    pub fn zeros(store: &mut ParamStore, prefix: &str, config: BaselineConfig) -> Result<Self> {
        Self::assemble(store, prefix, config, None::<&mut rand_chacha::ChaCha8Rng>)
    }

    fn assemble(
        store: &mut ParamStore,
        prefix: &str,
        config: BaselineConfig,
        mut rng: Option<&mut impl Rng>,
    ) -> Result<Self> {
        if config.num_tokens == 0 || config.num_classes == 0 {
            return Err(Error::Config("baseline needs tokens and classes".into()));
        }
        if config.embed_dim == 0 || config.hidden_dim == 0 {
            return Err(Error::Config("baseline dims must be positive".into()));
        }
        let (e, h) = (config.embed_dim, config.hidden_dim);
        let embed_value = match &mut rng {
            Some(rng) => Tensor::uniform(config.num_tokens, e, 1.0 / (e as f64).sqrt(), rng),
            None => Tensor::zeros(config.num_tokens, e),
        };
        let embed = store.add(&format!("{prefix}.embed"), embed_value);
        let cell = match config.kind {
            CellKind::Rnn => Cell::Rnn(Gate::build(store, &format!("{prefix}.rnn"), e, h, rng.as_deref_mut())),
            CellKind::Lstm => {
                let gate = |store: &mut ParamStore, rng: &mut Option<&mut _>, tag: &str| {
                    Gate::build(store, &format!("{prefix}.lstm.{tag}"), e, h, rng.as_deref_mut())
                };
                let input = gate(store, &mut rng, "i");
                let forget = gate(store, &mut rng, "f");
                let output = gate(store, &mut rng, "o");
                let cand = gate(store, &mut rng, "g");
                // standard stabilizer: start with the forget gate open
                store.value_mut(forget.b).fill(1.0);
                Cell::Lstm { input, forget, output, cand }
            }
        };
        let classifier = match rng {
            Some(rng) => {
                Linear::init(store, &format!("{prefix}.cls"), h, config.num_classes, rng)
            }
            None => Linear::zeros(store, &format!("{prefix}.cls"), h, config.num_classes),
        };
        Ok(BaselineModel { config, embed, cell, classifier })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    pub fn num_scalars(&self) -> usize {
        let (e, h) = (self.config.embed_dim, self.config.hidden_dim);
        let cell = match &self.cell {
            Cell::Rnn(g) => g.num_scalars(e, h),
            Cell::Lstm { input, .. } => 4 * input.num_scalars(e, h),
        };
        self.config.num_tokens * e + cell + self.classifier.num_scalars()
    }

    /// Per-position answer logits. `num_predictions` must be >= 1; the
    /// first prediction is read off after consuming the whole input (which
    /// ends with `ans`), later ones after feeding the marker again.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &[usize],
        num_predictions: usize,
    ) -> Result<Vec<Var>> {
        if inputs.is_empty() || num_predictions == 0 {
            return Err(Error::Format("baseline needs inputs and answer positions".into()));
        }
        for &id in inputs {
            if id == 0 || id > self.config.num_tokens {
                return Err(Error::Format(format!("token id {id} outside the vocabulary")));
            }
        }
        let h_dim = self.config.hidden_dim;
        let embed = tape.param(store, self.embed)?;
        let mut h = tape.zeros(1, h_dim)?;
        let mut c = tape.zeros(1, h_dim)?;
        let step = |tape: &mut Tape, row: usize, h: &mut Var, c: &mut Var| -> Result<()> {
            let x = tape.gather_rows(embed, &[row])?;
            match &self.cell {
                Cell::Rnn(gate) => {
                    let pre = gate.pre(tape, store, x, *h)?;
                    *h = tape.tanh(pre)?;
                }
                Cell::Lstm { input, forget, output, cand } => {
                    let i_pre = input.pre(tape, store, x, *h)?;
                    let f_pre = forget.pre(tape, store, x, *h)?;
                    let o_pre = output.pre(tape, store, x, *h)?;
                    let g_pre = cand.pre(tape, store, x, *h)?;
                    let i = tape.sigmoid(i_pre)?;
                    let f = tape.sigmoid(f_pre)?;
                    let o = tape.sigmoid(o_pre)?;
                    let g = tape.tanh(g_pre)?;
                    let keep = tape.mul(f, *c)?;
                    let write = tape.mul(i, g)?;
                    *c = tape.add(keep, write)?;
                    let squashed = tape.tanh(*c)?;
                    *h = tape.mul(o, squashed)?;
                }
            }
            Ok(())
        };
        for &id in inputs {
            step(tape, id - 1, &mut h, &mut c)?;
        }
        let mut logits = Vec::with_capacity(num_predictions);
        logits.push(self.classifier.apply(tape, store, h)?);
        let ans_row = inputs.last().unwrap() - 1;
        for _ in 1..num_predictions {
            step(tape, ans_row, &mut h, &mut c)?;
            logits.push(self.classifier.apply(tape, store, h)?);
        }
        Ok(logits)
    }

    /// Greedy class per answer position.
    pub fn predict(&self, store: &ParamStore, item: &TokenInstance) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, store, &item.inputs, item.targets.len())?;
        Ok(logits
            .into_iter()
            .map(|l| {
                let row = tape.value(l);
                let mut best = 0;
                for k in 1..row.shape().1 {
                    if row.get(0, k) > row.get(0, best) {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }
}

impl TrainableModel for BaselineModel {
    type Item = TokenInstance;

    fn loss(&self, tape: &mut Tape, store: &ParamStore, item: &TokenInstance) -> Result<Var> {
        for &t in &item.targets {
            if t >= self.config.num_classes {
                return Err(Error::Format(format!("class {t} outside the vocabulary")));
            }
        }
        let logits = self.forward(tape, store, &item.inputs, item.targets.len())?;
        let mut total: Option<Var> = None;
        for (l, &t) in logits.into_iter().zip(&item.targets) {
            let ce = tape.softmax_cross_entropy(l, t)?;
            total = Some(match total {
                None => ce,
                Some(acc) => tape.add(acc, ce)?,
            });
        }
        Ok(total.expect("at least one answer position"))
    }

    fn correct(&self, store: &ParamStore, item: &TokenInstance) -> Result<bool> {
        if !item.answer_known {
            return Ok(false);
        }
        Ok(self.predict(store, item)? == item.targets)
    }

    fn class_key(&self, item: &TokenInstance) -> usize {
        item.targets[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::output::softmax;
    use crate::tape::gradcheck;
    use crate::train::{train, TrainConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seqs(raw: &[&str]) -> Vec<Vec<String>> {
        raw.iter()
            .map(|s| s.split_whitespace().map(String::from).collect())
            .collect()
    }

    #[test]
    fn sequences_without_the_ans_marker_are_rejected() {
        let bad = seqs(&["n1 e1 n2 eol"]);
        assert!(BaselineVocab::build(&bad).is_err());
        let good = BaselineVocab::build(&seqs(&["n1 ans 1"])).unwrap();
        assert!(token_instance(&bad[0], &good).is_err());
    }

    #[test]
    fn prediction_count_follows_the_answer_positions() {
        let train = seqs(&["n1 e1 n2 eol q1 n1 ans 2", "n1 e1 n2 eol q1 n2 ans 1 2 1 2 1"]);
        let vocab = BaselineVocab::build(&train).unwrap();
        let single = token_instance(&train[0], &vocab).unwrap();
        let five = token_instance(&train[1], &vocab).unwrap();
        assert_eq!(single.targets.len(), 1);
        assert_eq!(five.targets.len(), 5);

        let mut store = ParamStore::new();
        let model = BaselineModel::zeros(
            &mut store,
            "b",
            BaselineConfig::new(CellKind::Rnn, &vocab),
        )
        .unwrap();
        let mut tape = Tape::new();
        let l1 = model.forward(&mut tape, &store, &single.inputs, 1).unwrap();
        let l5 = model.forward(&mut tape, &store, &five.inputs, 5).unwrap();
        assert_eq!(l1.len(), 1);
        assert_eq!(l5.len(), 5);
    }

    #[test]
    fn zero_parameters_give_uniform_distributions() {
        let train = seqs(&["n1 ans 1 2 3"]);
        let vocab = BaselineVocab::build(&train).unwrap();
        let mut store = ParamStore::new();
        let model = BaselineModel::zeros(
            &mut store,
            "b",
            BaselineConfig::new(CellKind::Lstm, &vocab),
        )
        .unwrap();
        let item = token_instance(&train[0], &vocab).unwrap();
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &store, &item.inputs, 3).unwrap();
        for l in logits {
            let p = softmax(tape.value(l).data());
            for v in p {
                assert!((v - 0.25).abs() < 1e-15, "4 classes incl. unk");
            }
        }
    }

    #[test]
    fn unseen_tokens_fall_back_to_unk_and_never_count_correct() {
        let train = seqs(&["n1 e1 n2 eol q1 n1 ans 2"]);
        let vocab = BaselineVocab::build(&train).unwrap();
        let novel = seqs(&["n9 e1 n2 eol q1 n1 ans 7"]);
        let item = token_instance(&novel[0], &vocab).unwrap();
        let unk = vocab.tokens.get(UNK).unwrap();
        assert_eq!(item.inputs[0], unk);
        assert!(!item.answer_known);
        assert_eq!(item.targets, vec![vocab.classes.get(UNK).unwrap() - 1]);

        let mut store = ParamStore::new();
        let model = BaselineModel::zeros(
            &mut store,
            "b",
            BaselineConfig::new(CellKind::Rnn, &vocab),
        )
        .unwrap();
        // even a prediction that matches the mapped target is not "correct"
        assert!(!model.correct(&store, &item).unwrap());
    }

    #[test]
    fn lstm_forget_bias_starts_open() {
        let train = seqs(&["n1 ans 1"]);
        let vocab = BaselineVocab::build(&train).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        BaselineModel::init(
            &mut store,
            "b",
            BaselineConfig::new(CellKind::Lstm, &vocab),
            &mut rng,
        )
        .unwrap();
        let b = store.value(store.id_by_name("b.lstm.f.b").unwrap());
        assert!(b.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn parameter_counts_are_reportable() {
        let train = seqs(&["n1 n2 n3 n4 n5 n6 n7 n8 ans 1 2 3 4"]);
        let vocab = BaselineVocab::build(&train).unwrap();
        // 10 tokens (8 + ans + unk), 5 classes (4 + unk)
        assert_eq!(vocab.num_tokens(), 10);
        assert_eq!(vocab.num_classes(), 5);
        let mut store = ParamStore::new();
        let lstm = BaselineModel::zeros(
            &mut store,
            "l",
            BaselineConfig::new(CellKind::Lstm, &vocab),
        )
        .unwrap();
        // 10*50 + 4*(50*50 + 50*50 + 50) + (50*5 + 5)
        assert_eq!(lstm.num_scalars(), 500 + 20_200 + 255);
        assert_eq!(store.num_scalars(), lstm.num_scalars());
        let mut store = ParamStore::new();
        let rnn = BaselineModel::zeros(
            &mut store,
            "r",
            BaselineConfig::new(CellKind::Rnn, &vocab),
        )
        .unwrap();
        assert_eq!(rnn.num_scalars(), 500 + 5_050 + 255);
    }

    /// Scalar re-computation of the RNN: two tokens, embed width 1, hidden
    /// width 2, all parameters hand-set.
    #[test]
    fn rnn_forward_matches_a_scalar_oracle() {
        let train = seqs(&["a b ans x y"]);
        let vocab = BaselineVocab::build(&train).unwrap();
        let config = BaselineConfig {
            kind: CellKind::Rnn,
            embed_dim: 1,
            hidden_dim: 2,
            num_tokens: vocab.num_tokens(),
            num_classes: vocab.num_classes(),
        };
        let mut store = ParamStore::new();
        let model = BaselineModel::zeros(&mut store, "b", config).unwrap();
        let set = |store: &mut ParamStore, name: &str, vals: &[f64]| {
            let id = store.id_by_name(name).unwrap();
            store.value_mut(id).data_mut().copy_from_slice(vals);
        };
        // tokens: unk=1 a=2 b=3 ans=4
        set(&mut store, "b.embed", &[0.0, 0.3, -0.4, 0.2]);
        set(&mut store, "b.rnn.w_x", &[0.5, -0.2]);
        set(&mut store, "b.rnn.w_h", &[0.1, 0.2, -0.3, 0.4]);
        set(&mut store, "b.rnn.b", &[0.05, -0.05]);
        set(&mut store, "b.cls.w", &[1.0, 0.0, 0.0, -1.0, 0.5, 0.5]);
        set(&mut store, "b.cls.b", &[0.0, 0.1, -0.1]);

        let inputs = vec![2usize, 3, 4];
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &store, &inputs, 2).unwrap();

        // manual loop
        let embed = [0.0, 0.3, -0.4, 0.2];
        let (wx, wh, b) = ([0.5, -0.2], [[0.1, 0.2], [-0.3, 0.4]], [0.05, -0.05]);
        let mut h = [0.0f64; 2];
        let step = |h: &mut [f64; 2], x: f64| {
            let mut next = [0.0f64; 2];
            for k in 0..2 {
                next[k] = (x * wx[k] + h[0] * wh[0][k] + h[1] * wh[1][k] + b[k]).tanh();
            }
            *h = next;
        };
        for &id in &inputs {
            step(&mut h, embed[id - 1]);
        }
        let cls_w = [[1.0, 0.0, 0.0], [-1.0, 0.5, 0.5]];
        let cls_b = [0.0, 0.1, -0.1];
        let logit = |h: &[f64; 2], k: usize| h[0] * cls_w[0][k] + h[1] * cls_w[1][k] + cls_b[k];
        for k in 0..3 {
            assert!((tape.value(logits[0]).get(0, k) - logit(&h, k)).abs() < 1e-12);
        }
        step(&mut h, embed[3]);
        for k in 0..3 {
            assert!((tape.value(logits[1]).get(0, k) - logit(&h, k)).abs() < 1e-12);
        }
    }

    /// Scalar re-computation of the LSTM: one step, width 2.
    #[test]
    fn lstm_forward_matches_a_scalar_oracle() {
        let train = seqs(&["a ans x"]);
        let vocab = BaselineVocab::build(&train).unwrap();
        let config = BaselineConfig {
            kind: CellKind::Lstm,
            embed_dim: 1,
            hidden_dim: 2,
            num_tokens: vocab.num_tokens(),
            num_classes: vocab.num_classes(),
        };
        let mut store = ParamStore::new();
        let model = BaselineModel::zeros(&mut store, "b", config).unwrap();
        let set = |store: &mut ParamStore, name: &str, vals: &[f64]| {
            let id = store.id_by_name(name).unwrap();
            store.value_mut(id).data_mut().copy_from_slice(vals);
        };
        // tokens: unk=1 a=2 ans=3
        set(&mut store, "b.embed", &[0.0, 0.6, -0.2]);
        let gates = [
            ("i", [0.4, -0.3], [[0.1, 0.0], [0.0, 0.1]], [0.0, 0.1]),
            ("f", [-0.2, 0.5], [[0.2, -0.1], [0.1, 0.2]], [1.0, 1.0]),
            ("o", [0.3, 0.3], [[-0.2, 0.1], [0.3, 0.0]], [-0.1, 0.0]),
            ("g", [0.7, -0.6], [[0.0, 0.2], [-0.1, 0.1]], [0.05, -0.05]),
        ];
        for (tag, wx, wh, b) in &gates {
            set(&mut store, &format!("b.lstm.{tag}.w_x"), wx);
            set(
                &mut store,
                &format!("b.lstm.{tag}.w_h"),
                &[wh[0][0], wh[0][1], wh[1][0], wh[1][1]],
            );
            set(&mut store, &format!("b.lstm.{tag}.b"), b);
        }
        set(&mut store, "b.cls.w", &[0.9, -0.9, 0.2, 0.2]);
        set(&mut store, "b.cls.b", &[0.0, 0.0]);

        let inputs = vec![2usize, 3];
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &store, &inputs, 1).unwrap();

        let sigmoid = |z: f64| 1.0 / (1.0 + (-z).exp());
        let embed = [0.0, 0.6, -0.2];
        let mut h = [0.0f64; 2];
        let mut c = [0.0f64; 2];
        for &id in &inputs {
            let x = embed[id - 1];
            let mut next_h = [0.0f64; 2];
            let mut next_c = [0.0f64; 2];
            for k in 0..2 {
                let pre = |(_, wx, wh, b): &(&str, [f64; 2], [[f64; 2]; 2], [f64; 2])| {
                    x * wx[k] + h[0] * wh[0][k] + h[1] * wh[1][k] + b[k]
                };
                let i = sigmoid(pre(&gates[0]));
                let f = sigmoid(pre(&gates[1]));
                let o = sigmoid(pre(&gates[2]));
                let g = pre(&gates[3]).tanh();
                next_c[k] = f * c[k] + i * g;
                next_h[k] = o * next_c[k].tanh();
            }
            h = next_h;
            c = next_c;
        }
        let cls_w = [[0.9, -0.9], [0.2, 0.2]];
        for k in 0..2 {
            let want = h[0] * cls_w[0][k] + h[1] * cls_w[1][k];
            assert!((tape.value(logits[0]).get(0, k) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_check_through_a_ten_token_sequence() {
        let train = seqs(&["a b c d e f g b a ans x y"]);
        let vocab = BaselineVocab::build(&train).unwrap();
        let item = token_instance(&train[0], &vocab).unwrap();
        assert_eq!(item.inputs.len(), 10);
        for kind in [CellKind::Rnn, CellKind::Lstm] {
            let config = BaselineConfig {
                kind,
                embed_dim: 3,
                hidden_dim: 4,
                num_tokens: vocab.num_tokens(),
                num_classes: vocab.num_classes(),
            };
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let model = BaselineModel::init(&mut store, "b", config, &mut rng).unwrap();
            let report = gradcheck(
                &mut store,
                |store, tape| model.loss(tape, store, &item),
                crate::tape::GRADCHECK_EPS,
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "{:?}: {}",
                kind.name(),
                report.max_rel_err
            );
        }
    }

    #[test]
    fn baseline_learns_a_two_way_token_task() {
        let stories = seqs(&[
            "a q ans x", "b q ans y", "a q ans x", "b q ans y",
            "a q ans x", "b q ans y", "a q ans x", "b q ans y",
        ]);
        let vocab = BaselineVocab::build(&stories).unwrap();
        let items = token_instances(&stories, &vocab).unwrap();
        let config = BaselineConfig {
            kind: CellKind::Rnn,
            embed_dim: 8,
            hidden_dim: 8,
            num_tokens: vocab.num_tokens(),
            num_classes: vocab.num_classes(),
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = BaselineModel::init(&mut store, "b", config, &mut rng).unwrap();
        let train_config = TrainConfig {
            minibatch: 4,
            max_epochs: 400,
            adam: crate::train::AdamConfig { lr: 1e-2, ..Default::default() },
            ..TrainConfig::default()
        };
        let outcome = train(&model, &mut store, &items, &items[..2], &train_config).unwrap();
        assert_eq!(outcome.best_valid_acc, 1.0);
    }
}
