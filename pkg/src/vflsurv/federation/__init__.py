from .convergence import (ConvergenceToy, bound_trajectory, run_toy,
                          verify_convergence_bound)
from .messages import (ControlMessage, DecodeError, EmbeddingMessage,
                       GradientMessage, decode_frame, decode_message,
                       encode_frame, encode_message)
from .training import (ClientState, PrivacySettings, ProtocolError,
                       RoundPlan, ServerState, TrainResult, TrainSettings,
                       evaluate_bundle, round_plan, run_centralized_training,
                       run_vfl_client_tcp, run_vfl_server_tcp,
                       run_vfl_training)
from .transport import (InProcPair, TcpClientChannel, TcpServerChannel,
                        TransportError, make_inproc_network, serve_clients)
