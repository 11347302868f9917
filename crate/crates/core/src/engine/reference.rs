use crate::error::Result;
use crate::kvstore::{FlatKvCache, KvBackend, KvHandle};
use crate::model::BaseModel;
use crate::numcore::argmax;
use crate::sampling::GuidedFsm;

/// Plain greedy decoding with the base model alone, one token per forward.
///
/// Stops after `max_new_tokens`, on a stop token, or when the FSM reaches a
/// final state. Shares no code path with the engine beyond the model itself.
pub fn greedy_reference(
    base: &BaseModel,
    prompt: &[u32],
    max_new_tokens: usize,
    fsm: Option<&GuidedFsm>,
    stop_tokens: &[u32],
) -> Result<Vec<u32>> {
    let mut cache = FlatKvCache::new(base.config.n_layers, base.config.dim);
    let seq = cache.open_seq();
    let mut kv = KvHandle::new(&mut cache, seq);
    let mut state = fsm.map(GuidedFsm::start);
    let mut out = Vec::new();
    let mut feed = prompt.to_vec();
    while out.len() < max_new_tokens {
        let o = base.base_forward(&feed, &mut kv)?;
        let logits = o.logits.row(o.logits.rows() - 1);
        let tok = match (fsm, state) {
            (Some(f), Some(s)) => {
                let mask = f.allowed_mask(s, logits.len());
                let mut best: Option<usize> = None;
                for (i, &l) in logits.iter().enumerate() {
                    if mask[i] && best.is_none_or(|b| l > logits[b]) {
                        best = Some(i);
                    }
                }
                best.ok_or(crate::error::Error::DeadState { state: s })? as u32
            }
            _ => argmax(logits) as u32,
        };
        out.push(tok);
        if let (Some(f), Some(s)) = (fsm, state) {
            state = f.fsm_advance(s, tok);
            if state.is_none_or(|n| f.is_final(n)) {
                break;
            }
        }
        if stop_tokens.contains(&tok) {
            break;
        }
        feed = vec![tok];
    }
    Ok(out)
}
