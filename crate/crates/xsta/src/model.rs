//! Parameter layout: two encoder branches with separate weights (target
//! initialized as a copy of source, mimicking a shared starting point),
//! a cross-attention fusion block, transfer-attention projections and a
//! shared span head.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::params::{Binder, Initializer, ParamStore};
use crate::tensor::Tensor;

pub const SRC_BRANCH: &str = "src";
pub const TGT_BRANCH: &str = "tgt";

#[derive(Debug, Clone)]
pub struct XstaModel {
    pub mcfg: ModelConfig,
    pub store: ParamStore,
}

fn attn_param_names(prefix: &str) -> [String; 8] {
    [
        format!("{prefix}.wq"),
        format!("{prefix}.wk"),
        format!("{prefix}.wv"),
        format!("{prefix}.wo"),
        format!("{prefix}.bq"),
        format!("{prefix}.bk"),
        format!("{prefix}.bv"),
        format!("{prefix}.bo"),
    ]
}

impl XstaModel {
    pub fn new(mcfg: ModelConfig, seed: u64) -> Result<Self> {
        mcfg.validate()?;
        let n = mcfg.hidden_size;
        let mut init = Initializer::new(seed, 0.02);
        let mut store = ParamStore::new();

        let insert_attn = |store: &mut ParamStore, init: &mut Initializer, prefix: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                store.insert(format!("{prefix}.{w}"), init.normal(&[n, n]), vec![n, n]);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                store.insert(format!("{prefix}.{b}"), vec![0.0; n], vec![n]);
            }
        };

        // source branch
        store.insert(
            "src.tok_emb",
            init.normal(&[mcfg.vocab_size, n]),
            vec![mcfg.vocab_size, n],
        );
        store.insert(
            "src.pos_emb",
            init.normal(&[mcfg.max_seq_len, n]),
            vec![mcfg.max_seq_len, n],
        );
        store.insert("src.emb_ln.g", vec![1.0; n], vec![n]);
        store.insert("src.emb_ln.b", vec![0.0; n], vec![n]);
        for l in 0..mcfg.num_layers {
            insert_attn(&mut store, &mut init, &format!("src.l{l}.attn"));
            store.insert(format!("src.l{l}.ln1.g"), vec![1.0; n], vec![n]);
            store.insert(format!("src.l{l}.ln1.b"), vec![0.0; n], vec![n]);
            store.insert(
                format!("src.l{l}.ffn.w1"),
                init.normal(&[n, mcfg.ffn_size]),
                vec![n, mcfg.ffn_size],
            );
            store.insert(format!("src.l{l}.ffn.b1"), vec![0.0; mcfg.ffn_size], vec![mcfg.ffn_size]);
            store.insert(
                format!("src.l{l}.ffn.w2"),
                init.normal(&[mcfg.ffn_size, n]),
                vec![mcfg.ffn_size, n],
            );
            store.insert(format!("src.l{l}.ffn.b2"), vec![0.0; n], vec![n]);
            store.insert(format!("src.l{l}.ln2.g"), vec![1.0; n], vec![n]);
            store.insert(format!("src.l{l}.ln2.b"), vec![0.0; n], vec![n]);
        }

        // target branch starts as a copy of the source branch
        let src_entries: Vec<(String, crate::params::ParamEntry)> = store
            .entries
            .iter()
            .filter(|(k, _)| k.starts_with("src."))
            .map(|(k, v)| (k.replacen("src.", "tgt.", 1), v.clone()))
            .collect();
        for (k, v) in src_entries {
            store.entries.insert(k, v);
        }

        // GDKS: separate cross-attention projections, zero-init correction,
        // lambda reparameterization starting at lambda = lambda0.
        insert_attn(&mut store, &mut init, "gdks.cross");
        let corr_in = if mcfg.f_source_only { n } else { 2 * n };
        store.insert("gdks.corr.w", vec![0.0; corr_in * n], vec![corr_in, n]);
        store.insert("gdks.corr.b", vec![0.0; n], vec![n]);
        store.insert("gdks.lambda_w", vec![1.0], vec![1]);
        store.insert("gdks.lambda_b", vec![0.0], vec![1]);

        // transfer attention: query/key projections only, no value path
        store.insert("calib.wq", init.normal(&[n, n]), vec![n, n]);
        store.insert("calib.wk", init.normal(&[n, n]), vec![n, n]);

        // shared span classifier
        store.insert("head.w", init.normal(&[n, 2]), vec![n, 2]);
        store.insert("head.b", vec![0.0; 2], vec![2]);

        Ok(XstaModel { mcfg, store })
    }

    pub fn bind<'a>(&self, binder: &mut Binder<'a>) -> Result<BoundModel> {
        BoundModel::bind(binder, &self.mcfg)
    }
}

#[derive(Clone)]
pub struct AttnParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bq: Tensor,
    pub bk: Tensor,
    pub bv: Tensor,
    pub bo: Tensor,
}

impl AttnParams {
    fn bind(binder: &mut Binder, prefix: &str) -> Result<Self> {
        let [wq, wk, wv, wo, bq, bk, bv, bo] = attn_param_names(prefix);
        Ok(AttnParams {
            wq: binder.bind(&wq)?,
            wk: binder.bind(&wk)?,
            wv: binder.bind(&wv)?,
            wo: binder.bind(&wo)?,
            bq: binder.bind(&bq)?,
            bk: binder.bind(&bk)?,
            bv: binder.bind(&bv)?,
            bo: binder.bind(&bo)?,
        })
    }
}

#[derive(Clone)]
pub struct LayerParams {
    pub attn: AttnParams,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
}

impl LayerParams {
    fn bind(binder: &mut Binder, branch: &str, l: usize) -> Result<Self> {
        Ok(LayerParams {
            attn: AttnParams::bind(binder, &format!("{branch}.l{l}.attn"))?,
            ln1_g: binder.bind(&format!("{branch}.l{l}.ln1.g"))?,
            ln1_b: binder.bind(&format!("{branch}.l{l}.ln1.b"))?,
            ffn_w1: binder.bind(&format!("{branch}.l{l}.ffn.w1"))?,
            ffn_b1: binder.bind(&format!("{branch}.l{l}.ffn.b1"))?,
            ffn_w2: binder.bind(&format!("{branch}.l{l}.ffn.w2"))?,
            ffn_b2: binder.bind(&format!("{branch}.l{l}.ffn.b2"))?,
            ln2_g: binder.bind(&format!("{branch}.l{l}.ln2.g"))?,
            ln2_b: binder.bind(&format!("{branch}.l{l}.ln2.b"))?,
        })
    }
}

#[derive(Clone)]
pub struct BranchParams {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub emb_ln_g: Tensor,
    pub emb_ln_b: Tensor,
    pub layers: Vec<LayerParams>,
}

impl BranchParams {
    fn bind(binder: &mut Binder, branch: &str, num_layers: usize) -> Result<Self> {
        Ok(BranchParams {
            tok_emb: binder.bind(&format!("{branch}.tok_emb"))?,
            pos_emb: binder.bind(&format!("{branch}.pos_emb"))?,
            emb_ln_g: binder.bind(&format!("{branch}.emb_ln.g"))?,
            emb_ln_b: binder.bind(&format!("{branch}.emb_ln.b"))?,
            layers: (0..num_layers)
                .map(|l| LayerParams::bind(binder, branch, l))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Clone)]
pub struct GdksParams {
    pub cross: AttnParams,
    pub corr_w: Tensor,
    pub corr_b: Tensor,
    pub lambda_w: Tensor,
    pub lambda_b: Tensor,
}

#[derive(Clone)]
pub struct CalibParams {
    pub wq: Tensor,
    pub wk: Tensor,
}

#[derive(Clone)]
pub struct HeadParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Clone)]
pub struct BoundModel {
    pub src: BranchParams,
    pub tgt: BranchParams,
    pub gdks: GdksParams,
    pub calib: CalibParams,
    pub head: HeadParams,
}

impl BoundModel {
    pub fn bind(binder: &mut Binder, mcfg: &ModelConfig) -> Result<Self> {
        Ok(BoundModel {
            src: BranchParams::bind(binder, SRC_BRANCH, mcfg.num_layers)?,
            tgt: BranchParams::bind(binder, TGT_BRANCH, mcfg.num_layers)?,
            gdks: GdksParams {
                cross: AttnParams::bind(binder, "gdks.cross")?,
                corr_w: binder.bind("gdks.corr.w")?,
                corr_b: binder.bind("gdks.corr.b")?,
                lambda_w: binder.bind("gdks.lambda_w")?,
                lambda_b: binder.bind("gdks.lambda_b")?,
            },
            calib: CalibParams {
                wq: binder.bind("calib.wq")?,
                wk: binder.bind("calib.wk")?,
            },
            head: HeadParams {
                w: binder.bind("head.w")?,
                b: binder.bind("head.b")?,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 16,
            vocab_size: 11,
            max_seq_len: 12,
            dropout_rate: 0.0,
            gdks_layer: 1,
            gdks_skip_ffn: false,
            f_source_only: false,
        }
    }

    #[test]
    fn target_branch_starts_as_bitwise_copy_of_source() {
        let model = XstaModel::new(tiny_cfg(), 3).unwrap();
        let mut pairs = 0;
        for (name, entry) in &model.store.entries {
            if let Some(rest) = name.strip_prefix("src.") {
                let tgt = model.store.get(&format!("tgt.{rest}")).unwrap();
                assert_eq!(entry, tgt, "{name} differs from its target copy");
                pairs += 1;
            }
        }
        assert!(pairs > 0);
    }

    #[test]
    fn correction_and_lambda_start_values() {
        let model = XstaModel::new(tiny_cfg(), 3).unwrap();
        let corr = model.store.get("gdks.corr.w").unwrap();
        assert_eq!(corr.shape, vec![16, 8]);
        assert!(corr.data.iter().all(|&v| v == 0.0));
        assert_eq!(model.store.get("gdks.lambda_w").unwrap().data, vec![1.0]);
        assert_eq!(model.store.get("gdks.lambda_b").unwrap().data, vec![0.0]);
    }

    #[test]
    fn f_source_only_shrinks_correction_input() {
        let mut cfg = tiny_cfg();
        cfg.f_source_only = true;
        let model = XstaModel::new(cfg, 3).unwrap();
        assert_eq!(model.store.get("gdks.corr.w").unwrap().shape, vec![8, 8]);
    }

    #[test]
    fn construction_is_seed_deterministic() {
        let a = XstaModel::new(tiny_cfg(), 7).unwrap();
        let b = XstaModel::new(tiny_cfg(), 7).unwrap();
        assert_eq!(a.store.entries, b.store.entries);
        let c = XstaModel::new(tiny_cfg(), 8).unwrap();
        assert_ne!(
            a.store.get("src.tok_emb").unwrap().data,
            c.store.get("src.tok_emb").unwrap().data
        );
    }

    #[test]
    fn bind_covers_every_parameter() {
        let model = XstaModel::new(tiny_cfg(), 3).unwrap();
        let tape = crate::tensor::Tape::new(0);
        let mut binder = crate::params::Binder::new(&tape, &model.store);
        model.bind(&mut binder).unwrap();
        assert_eq!(binder.bound.len(), model.store.entries.len());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = tiny_cfg();
        cfg.gdks_layer = 2;
        assert!(XstaModel::new(cfg, 3).is_err());
    }
}
