from datetime import datetime

from utils.errors import ConfigError


class CommunicationLedger:
    """Tracks the phases and counted communication events of one simulated federation"""

    def __init__(self):
        """Initialize the ledger state"""
        # Sequential phases of a run
        self.phases = [
            "INITIALIZATION",      # Shards and config validated
            "SURROGATE_EXCHANGE",  # Clients send q_s to the server once
            "SAMPLING",            # Chain passed between clients
            "COMPLETION"           # Trace assembled
        ]
        self.current_phase = "INITIALIZATION"
        self.completed_phases = set()

        # Counted events
        self.client_selections = 0
        self.chain_transfers = 0
        self.surrogate_uploads = 0
        self.visits_per_shard = {}

        # Timestamps live here only; they never enter hashes or trace files
        self.phase_timestamps = {
            "INITIALIZATION": datetime.now().isoformat()
        }
        self.transition_history = []

    def advance_phase(self):
        """Move to the next phase"""
        current_index = self.phases.index(self.current_phase)
        self.completed_phases.add(self.current_phase)

        if current_index < len(self.phases) - 1:
            old_phase = self.current_phase
            self.current_phase = self.phases[current_index + 1]
            self.phase_timestamps[self.current_phase] = datetime.now().isoformat()
            self.transition_history.append({
                "from": old_phase,
                "to": self.current_phase,
                "timestamp": datetime.now().isoformat()
            })
            return self.current_phase
        return None

    def advance_to(self, phase):
        """Advance through intermediate phases until `phase` is current"""
        target = self.phases.index(phase)
        if target < self.phases.index(self.current_phase):
            raise ConfigError(f"cannot return to phase {phase} from {self.current_phase}")
        while self.current_phase != phase:
            self.advance_phase()

    def record_surrogate_exchange(self, n_shards):
        """One upload per client, allowed once and only before sampling"""
        if self.surrogate_uploads:
            raise ConfigError("surrogates were already communicated for this run")
        if self.phases.index(self.current_phase) > self.phases.index("SURROGATE_EXCHANGE"):
            raise ConfigError("surrogates must be communicated before sampling starts")
        self.advance_to("SURROGATE_EXCHANGE")
        self.surrogate_uploads = n_shards

    def record_selection(self, shard_id):
        """Server picked a client and passed the chain to it"""
        if self.current_phase != "SAMPLING":
            self.advance_to("SAMPLING")
        self.client_selections += 1
        self.chain_transfers += 1
        self.visits_per_shard[shard_id] = self.visits_per_shard.get(shard_id, 0) + 1

    def complete(self):
        self.advance_to("COMPLETION")
        self.completed_phases.add("COMPLETION")

    def counts(self):
        """Deterministic part of the ledger"""
        return {
            "client_selections": self.client_selections,
            "chain_transfers": self.chain_transfers,
            "surrogate_uploads": self.surrogate_uploads,
            "visits_per_shard": {str(k): v for k, v in sorted(self.visits_per_shard.items())},
        }

    def save_state(self):
        """Serialize the ledger to a dictionary"""
        return {
            "current_phase": self.current_phase,
            "phases": self.phases,
            "completed_phases": [p for p in self.phases if p in self.completed_phases],
            "counts": self.counts(),
            "phase_timestamps": self.phase_timestamps,
            "transition_history": self.transition_history
        }

    def load_state(self, state_dict):
        """Deserialize the ledger from a dictionary"""
        if not state_dict:
            return

        self.current_phase = state_dict.get("current_phase", "INITIALIZATION")
        self.phases = state_dict.get("phases", self.phases)
        self.completed_phases = set(state_dict.get("completed_phases", []))
        counts = state_dict.get("counts", {})
        self.client_selections = counts.get("client_selections", 0)
        self.chain_transfers = counts.get("chain_transfers", 0)
        self.surrogate_uploads = counts.get("surrogate_uploads", 0)
        self.visits_per_shard = {int(k): v for k, v in counts.get("visits_per_shard", {}).items()}
        self.phase_timestamps = state_dict.get("phase_timestamps", {})
        self.transition_history = state_dict.get("transition_history", [])

    def visualize_progress(self):
        """Text view of phase progress"""
        progress = []
        for phase in self.phases:
            if phase == self.current_phase and phase not in self.completed_phases:
                progress.append(f"[CURRENT] {phase}")
            elif phase in self.completed_phases:
                progress.append(f"[DONE] {phase}")
            else:
                progress.append(f"[PENDING] {phase}")

        return "\n".join(progress)
