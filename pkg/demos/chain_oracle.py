"""
Direct-method value estimate against exact chain values
=======================================================

On the 10-cell chain every quantity has a closed form. Load a critic that
reads the exact value of the "always right" policy off the one-hot state,
freeze an actor that always moves right, and compare the estimate on a
held-out split with the enumerated average.
"""
import numpy as np

from sopelab import envlab
from sopelab.agent import AgentConfig, SacAgent
from sopelab.opestop import estimate_j_dm
from sopelab.replay import DualReplayBuffer

gamma = 0.95
exact = envlab.chain_q_values(1.0, gamma)[:, 1]
print("exact values per cell:", np.round(exact, 4))

agent = SacAgent(AgentConfig(10, 1, hidden=(10,), dropout=0.0, layer_norm=False, gamma=gamma),
                 np.random.default_rng(0))
# identity hidden layer, value readout, action ignored
agent.critic.weights[0][...] = 0.0
agent.critic.weights[0][:, :10, :] = np.eye(10)
agent.critic.biases[0][...] = 0.0
agent.critic.weights[1][...] = exact[None, :, None]
agent.critic.biases[1][...] = 0.0
agent.actor.weights[-1][...] = 0.0
agent.actor.biases[-1][...] = [3.0, -5.0]

data = envlab.generate_dataset("chain", envlab.uniform_policy(1), 1000, seed=0)
buffer = DualReplayBuffer(10, 1, 10).load_offline(data)
split = buffer.make_split(0.1, seed=1)
states = buffer.states(split.validation)

estimate = estimate_j_dm(agent, states, deterministic=True)
print("estimate on", estimate.n_states, "held-out states:", estimate.value)
print("enumerated average:           ", exact[states.argmax(axis=1)].mean())

# the uniform policy's undiscounted episode return, exactly and by simulation
spec = envlab.make_spec("chain")
sim = [envlab.rollout_return(spec, envlab.uniform_policy(1), s, np.random.default_rng(s)) for s in range(5000)]
print("random return exact", envlab.chain_expected_return(0.5, spec.max_steps), "simulated", np.mean(sim))
