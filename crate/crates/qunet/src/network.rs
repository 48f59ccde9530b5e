//! Party identities, the deterministic classical-message bus, step plans,
//! and transcript replay. Renders the local-operations-plus-classical-
//! communication structure of the protocols explicit and auditable: a party
//! may only condition an operation on results that are in its inbox at that
//! step.

use crate::error::{Error, Result};
use crate::gates::BellOutcome;
use crate::protocols::{ProtocolConfig, ProtocolKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Sender,
    Receiver,
}

/// One party, unique within a run. Senders are the Bobs, receivers the
/// Alices; indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PartyId {
    pub role: Role,
    pub index: usize,
}

impl PartyId {
    pub fn sender(index: usize) -> Self {
        PartyId { role: Role::Sender, index }
    }

    pub fn receiver(index: usize) -> Self {
        PartyId { role: Role::Receiver, index }
    }

    pub fn label(&self) -> String {
        match self.role {
            Role::Sender => format!("bob{}", self.index),
            Role::Receiver => format!("alice{}", self.index),
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        if let Some(i) = s.strip_prefix("bob") {
            return Ok(PartyId::sender(i.parse().map_err(|_| Error::Parse(format!("bad party {s}")))?));
        }
        if let Some(i) = s.strip_prefix("alice") {
            return Ok(PartyId::receiver(
                i.parse().map_err(|_| Error::Parse(format!("bad party {s}")))?,
            ));
        }
        Err(Error::Parse(format!("bad party label {s}")))
    }
}

/// Measurement result carried by a classical message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Bell { m: usize, n: usize },
    /// Projector outcome: the flat outcome index together with its
    /// complementary digit decomposition in ascending site order.
    Projector { outcome: usize, digits: Vec<usize> },
}

impl Payload {
    pub fn bell(o: BellOutcome) -> Self {
        Payload::Bell { m: o.m, n: o.n }
    }
}

/// One multicast: a sender, a nonempty recipient list, a round number, and
/// the measurement result.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalMessage {
    pub from: PartyId,
    pub to: Vec<PartyId>,
    pub round: usize,
    pub payload: Payload,
}

/// Append-only message log. Rounds increase monotonically along the log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    messages: Vec<ClassicalMessage>,
}

impl Transcript {
    pub fn new() -> Self {
        Transcript { messages: Vec::new() }
    }

    /// Append a message; the round must not regress and recipients must be
    /// nonempty.
    pub fn deliver(&mut self, message: ClassicalMessage) -> Result<()> {
        if message.to.is_empty() {
            return Err(Error::ConfigInvalid("message has no recipients".into()));
        }
        if let Some(last) = self.messages.last() {
            if message.round < last.round {
                return Err(Error::RoundRegression { round: message.round, last: last.round });
            }
        }
        self.messages.push(message);
        Ok(())
    }

    pub fn messages(&self) -> &[ClassicalMessage] {
        &self.messages
    }

    /// Flatten the recorded outcomes into the branch-tuple encoding used by
    /// forced execution: Bell payloads contribute `m, n`, projector payloads
    /// their flat outcome index, in log order.
    pub fn forced_outcomes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for msg in &self.messages {
            match &msg.payload {
                Payload::Bell { m, n } => {
                    out.push(*m);
                    out.push(*n);
                }
                Payload::Projector { outcome, .. } => out.push(*outcome),
            }
        }
        out
    }
}

/// One scheduled protocol step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanStep {
    pub round: usize,
    pub kind: StepKind,
}

/// The step vocabulary shared by all four protocols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepKind {
    /// A sharing party undoes the label shift left by `producer`'s Bell
    /// result on its own resource leg.
    ShiftCorrection { party: PartyId, producer: PartyId },
    /// The phase-holding receiver undoes both the shift and the phase left
    /// by `producer`'s Bell result.
    FullCorrection { party: PartyId, producer: PartyId },
    /// Sender spreads its input qudit over the complementary digits.
    SenderSpread { sender: usize },
    /// Sender measures (input, own leg) in the generalized Bell basis.
    BellMeasure { sender: usize },
    /// Sender multicasts its Bell result.
    BellMulticast { sender: usize, to: Vec<PartyId> },
    /// Receiver applies the digit spread on its leg.
    ReceiverSpread { receiver: usize },
    /// Receiver measures its digit projector family.
    ReceiverProject { receiver: usize },
    /// Receiver multicasts its projector outcome.
    ReceiverMulticast { receiver: usize, to: Vec<PartyId> },
    /// Receiver relabels its support back onto its own digit.
    ReceiverRelabel { receiver: usize },
    /// Receiver removes the digit phase keyed on `peer`'s reported outcome.
    PeerPhase { receiver: usize, peer: usize },
}

impl StepKind {
    /// Measurement result this step consumes, if any.
    fn consumes(&self) -> Option<PartyId> {
        match self {
            StepKind::ShiftCorrection { producer, .. } => Some(*producer),
            StepKind::FullCorrection { producer, .. } => Some(*producer),
            StepKind::PeerPhase { peer, .. } => Some(PartyId::receiver(*peer)),
            _ => None,
        }
    }

    /// Measurement result this step produces, if any.
    fn produces(&self) -> Option<PartyId> {
        match self {
            StepKind::BellMeasure { sender } => Some(PartyId::sender(*sender)),
            StepKind::ReceiverProject { receiver } => Some(PartyId::receiver(*receiver)),
            _ => None,
        }
    }

    /// Party whose inbox must hold the consumed result.
    fn actor(&self) -> Option<PartyId> {
        match self {
            StepKind::ShiftCorrection { party, .. } => Some(*party),
            StepKind::FullCorrection { party, .. } => Some(*party),
            StepKind::PeerPhase { receiver, .. } => Some(PartyId::receiver(*receiver)),
            _ => None,
        }
    }
}

/// Build the step plan for a configuration. The plan is a total order
/// consistent with the message dependencies: no party consumes a result
/// before it has been multicast to it.
pub fn schedule(config: &ProtocolConfig) -> Result<Vec<PlanStep>> {
    config.validate()?;
    let n = config.dims.len();
    let mut plan = Vec::new();
    let mut round = 0usize;

    let sender_rounds = |plan: &mut Vec<PlanStep>, round: &mut usize, receivers: usize| {
        for i in 1..=n {
            for j in 1..i {
                plan.push(PlanStep {
                    round: *round,
                    kind: StepKind::ShiftCorrection {
                        party: PartyId::sender(i),
                        producer: PartyId::sender(j),
                    },
                });
            }
            plan.push(PlanStep { round: *round, kind: StepKind::SenderSpread { sender: i } });
            plan.push(PlanStep { round: *round, kind: StepKind::BellMeasure { sender: i } });
            let mut to: Vec<PartyId> = (1..=receivers).map(PartyId::receiver).collect();
            to.extend((i + 1..=n).map(PartyId::sender));
            plan.push(PlanStep { round: *round, kind: StepKind::BellMulticast { sender: i, to } });
            *round += 1;
            plan.push(PlanStep {
                round: *round,
                kind: StepKind::FullCorrection {
                    party: PartyId::receiver(1),
                    producer: PartyId::sender(i),
                },
            });
            for r in 2..=receivers {
                plan.push(PlanStep {
                    round: *round,
                    kind: StepKind::ShiftCorrection {
                        party: PartyId::receiver(r),
                        producer: PartyId::sender(i),
                    },
                });
            }
            *round += 1;
        }
    };

    let receiver_rounds = |plan: &mut Vec<PlanStep>, round: &mut usize, receivers: usize| {
        for i in 1..=receivers {
            plan.push(PlanStep { round: *round, kind: StepKind::ReceiverSpread { receiver: i } });
            plan.push(PlanStep { round: *round, kind: StepKind::ReceiverProject { receiver: i } });
            let to: Vec<PartyId> =
                (1..=receivers).filter(|&j| j != i).map(PartyId::receiver).collect();
            if !to.is_empty() {
                plan.push(PlanStep {
                    round: *round,
                    kind: StepKind::ReceiverMulticast { receiver: i, to },
                });
            }
            plan.push(PlanStep { round: *round, kind: StepKind::ReceiverRelabel { receiver: i } });
            *round += 1;
        }
        for i in 1..=receivers {
            for j in 1..=receivers {
                if j != i {
                    plan.push(PlanStep {
                        round: *round,
                        kind: StepKind::PeerPhase { receiver: i, peer: j },
                    });
                }
            }
        }
        if receivers > 1 {
            *round += 1;
        }
    };

    match config.kind {
        ProtocolKind::ManyToOne => sender_rounds(&mut plan, &mut round, 1),
        ProtocolKind::OneToMany => {
            // Single sender measuring the jointly encoded qudit.
            plan.push(PlanStep { round, kind: StepKind::BellMeasure { sender: 1 } });
            let to: Vec<PartyId> = (1..=n).map(PartyId::receiver).collect();
            plan.push(PlanStep { round, kind: StepKind::BellMulticast { sender: 1, to } });
            round += 1;
            plan.push(PlanStep {
                round,
                kind: StepKind::FullCorrection {
                    party: PartyId::receiver(1),
                    producer: PartyId::sender(1),
                },
            });
            for r in 2..=n {
                plan.push(PlanStep {
                    round,
                    kind: StepKind::ShiftCorrection {
                        party: PartyId::receiver(r),
                        producer: PartyId::sender(1),
                    },
                });
            }
            round += 1;
            receiver_rounds(&mut plan, &mut round, n);
        }
        ProtocolKind::ManyToMany | ProtocolKind::TwoWay => {
            sender_rounds(&mut plan, &mut round, n);
            receiver_rounds(&mut plan, &mut round, n);
        }
    }
    validate_plan(&plan)?;
    Ok(plan)
}

/// Check that every consumed result is produced and multicast to the acting
/// party earlier in the plan.
pub fn validate_plan(plan: &[PlanStep]) -> Result<()> {
    let mut produced: Vec<PartyId> = Vec::new();
    let mut delivered: Vec<(PartyId, PartyId)> = Vec::new(); // (producer, recipient)
    let mut last_round = 0usize;
    for step in plan {
        if step.round < last_round {
            return Err(Error::ConfigInvalid("plan rounds regress".into()));
        }
        last_round = step.round;
        match &step.kind {
            StepKind::BellMulticast { sender, to } => {
                let producer = PartyId::sender(*sender);
                if !produced.contains(&producer) {
                    return Err(Error::ConfigInvalid(format!(
                        "{} multicasts before measuring",
                        producer.label()
                    )));
                }
                for r in to {
                    delivered.push((producer, *r));
                }
            }
            StepKind::ReceiverMulticast { receiver, to } => {
                let producer = PartyId::receiver(*receiver);
                if !produced.contains(&producer) {
                    return Err(Error::ConfigInvalid(format!(
                        "{} multicasts before measuring",
                        producer.label()
                    )));
                }
                for r in to {
                    delivered.push((producer, *r));
                }
            }
            kind => {
                if let Some(p) = kind.produces() {
                    produced.push(p);
                }
                if let (Some(actor), Some(producer)) = (kind.actor(), kind.consumes()) {
                    if !delivered.contains(&(producer, actor)) {
                        return Err(Error::ConfigInvalid(format!(
                            "{} consumes a result from {} that was never delivered to it",
                            actor.label(),
                            producer.label()
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Re-run a configuration forcing every measurement to the transcript's
/// recorded outcome, returning the final states. Errors with
/// `TranscriptMismatch` when a recorded outcome has zero probability under
/// the configuration.
pub fn replay(
    transcript: &Transcript,
    config: &ProtocolConfig,
) -> Result<Vec<crate::qudit_core::StateVector>> {
    let forced = transcript.forced_outcomes();
    let mut cfg = config.clone();
    cfg.mode = crate::protocols::ExecutionMode::Branch(forced);
    let report = crate::protocols::run(&cfg).map_err(|e| match e {
        Error::ZeroProbabilityBranch { outcome } => Error::TranscriptMismatch(format!(
            "recorded outcome {outcome} has zero probability under this configuration"
        )),
        other => other,
    })?;
    report
        .final_states
        .ok_or_else(|| Error::TranscriptMismatch("replay produced no final states".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::{ExecutionMode, InputSource, ProtocolConfig};

    fn config(kind: ProtocolKind, dims: &[usize]) -> ProtocolConfig {
        ProtocolConfig {
            kind,
            dims: dims.to_vec(),
            recv_dims: None,
            inputs: InputSource::Seeded(7),
            mode: ExecutionMode::Enumerate,
            max_dim: crate::qudit_core::DEFAULT_MAX_DIM,
        }
    }

    #[test]
    fn single_sender_plan_has_no_shift_steps() {
        let plan = schedule(&config(ProtocolKind::ManyToOne, &[4])).unwrap();
        assert!(plan
            .iter()
            .all(|s| !matches!(s.kind, StepKind::ShiftCorrection { party: PartyId { role: Role::Sender, .. }, .. })));
        assert!(matches!(plan[0].kind, StepKind::SenderSpread { sender: 1 }));
    }

    #[test]
    fn second_sender_unshifts_after_first() {
        let plan = schedule(&config(ProtocolKind::ManyToOne, &[2, 2])).unwrap();
        let shift_pos = plan
            .iter()
            .position(|s| {
                matches!(
                    s.kind,
                    StepKind::ShiftCorrection { party: PartyId { role: Role::Sender, index: 2 }, .. }
                )
            })
            .unwrap();
        let multicast_pos = plan
            .iter()
            .position(|s| matches!(s.kind, StepKind::BellMulticast { sender: 1, .. }))
            .unwrap();
        assert!(multicast_pos < shift_pos);
    }

    #[test]
    fn multicast_recipients_are_receivers_and_later_senders() {
        let plan = schedule(&config(ProtocolKind::ManyToOne, &[2, 2, 2])).unwrap();
        for step in &plan {
            if let StepKind::BellMulticast { sender, to } = &step.kind {
                let mut want: Vec<PartyId> = vec![PartyId::receiver(1)];
                want.extend((sender + 1..=3).map(PartyId::sender));
                assert_eq!(to, &want);
            }
        }
    }

    #[test]
    fn cyclic_plan_rejected() {
        let mut plan = schedule(&config(ProtocolKind::ManyToOne, &[2, 2])).unwrap();
        // Move the first multicast after the step that consumes it.
        let pos = plan
            .iter()
            .position(|s| matches!(s.kind, StepKind::BellMulticast { sender: 1, .. }))
            .unwrap();
        let msg = plan.remove(pos);
        plan.push(msg);
        assert!(matches!(validate_plan(&plan), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn transcript_rounds_monotone() {
        let mut t = Transcript::new();
        t.deliver(ClassicalMessage {
            from: PartyId::sender(1),
            to: vec![PartyId::receiver(1)],
            round: 1,
            payload: Payload::Bell { m: 0, n: 0 },
        })
        .unwrap();
        assert_eq!(t.messages().len(), 1);

        let err = t.deliver(ClassicalMessage {
            from: PartyId::sender(2),
            to: vec![PartyId::receiver(1)],
            round: 0,
            payload: Payload::Bell { m: 0, n: 0 },
        });
        assert!(matches!(err, Err(Error::RoundRegression { round: 0, last: 1 })));

        t.deliver(ClassicalMessage {
            from: PartyId::sender(2),
            to: vec![PartyId::receiver(1), PartyId::sender(3), PartyId::sender(4)],
            round: 2,
            payload: Payload::Bell { m: 1, n: 1 },
        })
        .unwrap();
        assert_eq!(t.messages().len(), 2);
        assert_eq!(t.messages()[1].to.len(), 3);

        let err = t.deliver(ClassicalMessage {
            from: PartyId::sender(1),
            to: vec![],
            round: 3,
            payload: Payload::Bell { m: 0, n: 0 },
        });
        assert!(err.is_err());
    }

    #[test]
    fn party_labels_round_trip() {
        for p in [PartyId::sender(1), PartyId::receiver(12)] {
            assert_eq!(PartyId::from_label(&p.label()).unwrap(), p);
        }
        assert!(PartyId::from_label("carol3").is_err());
    }
}
