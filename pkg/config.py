import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Data / output locations
DATA_DIR = os.getenv('REACTION_DATA_DIR', 'data')
RUNS_DIR = os.getenv('REACTION_RUNS_DIR', 'runs')

# Motion representation
FPS = 30                    # frames per second of every clip
JOINT_COUNT = 22            # SMPL body joints
HISTORY_FRAMES = 20         # h: attended interaction history
WINDOW_FRAMES = 40          # k: predicted frames per window
WARMUP_FRAMES = 30          # 1 second of actor motion before the first plan

REACTOR_DIM = 263
ACTOR_DIM = 144
FIELD_DIM = 36
FRAME_DIM = REACTOR_DIM + ACTOR_DIM + FIELD_DIM  # 443

# Contact detection thresholds
FIELD_THRESHOLD = 0.2          # meters, interaction-field contact distance (tie counts)
FOOT_HEIGHT_THRESHOLD = 0.05   # meters
FOOT_SPEED_THRESHOLD = 0.15    # meters / second
STD_FLOOR = 1e-8
GENERATED_ZSCORE_LIMIT = 20.0  # clip for normalized history built from generated motion

# Diffusion
DIFFUSION_STEPS = 8
SCHEDULE_KIND = 'cosine'
GUIDANCE_WEIGHT = 5.0
TEXT_MASK_RATE = 0.15

# Training
LOSS_WEIGHTS = {'foot': 0.2, 'inter': 0.5, 'prefix': 0.1}
CONSECUTIVE_WINDOWS = 3
LEARNING_RATE = 1e-4
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
GRAD_CLIP = 1.0

# Denoiser profiles: (layers, hidden, heads, time_embed_dim, text_embed_dim)
DENOISER_PROFILES = {
    'tiny': {'layers': 2, 'hidden': 64, 'heads': 4, 'time_embed_dim': 64, 'text_embed_dim': 64},
    'full': {'layers': 8, 'hidden': 512, 'heads': 8, 'time_embed_dim': 512, 'text_embed_dim': 512},
}

# Actor-aware reward
REWARD_SHARPNESS = 100.0      # k_p, imitation exponent
DEFAULT_REWARD_SCALE = 0.5
ROOT_SATURATION = 0.4         # meters, no root reward change beyond this
SIMILARITY_JOINTS = 22        # 24 pads two zero joints

# Metrics
JOINT_RADIUS = 0.06           # meters, joint-sphere body approximation
VOXEL_SIZE = 0.01             # meters, interpenetration grid
DIVERSITY_SUBSET = 200        # S_d
MOTION_FEATURE_DIM = 256
FEATURE_PROJECTION_SEED = 0

# Online planner
LATENCY_TARGET_MS = 500.0
QUEUE_DEPTH = 4
WARMUP_INIT = os.getenv('REACTION_WARMUP_INIT', 'sample')   # 'sample' or 'rest'
REACTOR_START_DISTANCE = 1.0  # meters in front of the actor at warm-up
TRACKER_BLEND_RATE = 0.5
