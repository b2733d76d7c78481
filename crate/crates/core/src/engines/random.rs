use rand::Rng;

use super::{FieldMutation, MutationLog};
use crate::dissector::{write_field_in_place, DissectedPacket, FieldDescriptor};
use crate::mle::MlePacket;

/// Draws a replacement value: uniform over the domain half the time,
/// otherwise uniform over the boundary set `{0, 1, max, max - 1}`.
pub fn draw_value<R: Rng + ?Sized>(d: &FieldDescriptor, rng: &mut R) -> u64 {
    let max = d.max_value();
    if rng.random_bool(0.5) {
        rng.random::<u64>() & max
    } else {
        let mut special = vec![0, 1, max, max.saturating_sub(1)];
        special.sort_unstable();
        special.dedup();
        special[rng.random_range(0..special.len())]
    }
}

/// Mutates each field independently with its probability; `probs` is aligned with `d.fields`.
pub fn random_fuzz<R: Rng + ?Sized>(
    packet: &MlePacket,
    d: &DissectedPacket,
    probs: &[f64],
    rng: &mut R,
) -> (MlePacket, MutationLog) {
    debug_assert_eq!(probs.len(), d.fields.len());
    let mut out = packet.clone();
    let mut log = MutationLog::new(0);
    let message = packet.message_type;
    for (field, &p) in d.fields.iter().zip(probs) {
        if rng.random::<f64>() >= p {
            continue;
        }
        let new = draw_value(field, rng);
        // Descriptors from `d` stay valid: writes never move byte offsets.
        let Ok(old) = crate::dissector::read_field(&out, field) else { continue };
        if write_field_in_place(&mut out, field, new).is_ok() {
            log.mutations.push(FieldMutation {
                message,
                path: field.path.clone(),
                bit_width: field.bit_width,
                old,
                new,
            });
        }
    }
    (out, log)
}
