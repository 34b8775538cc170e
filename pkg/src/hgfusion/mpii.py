"""MPII joint order, activity categories, report columns and skeleton edges."""

JOINT_NAMES = (
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle",
    "pelvis", "thorax", "upper_neck", "head_top",
    "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
)
NUM_JOINTS = len(JOINT_NAMES)

NECK, HEAD_TOP = 8, 9

# Column order of the per-joint results table; paired joints are pooled.
JOINT_CATEGORIES = {
    "Head": (9,),
    "Neck": (8,),
    "Torso": (7,),
    "Pelvis": (6,),
    "Shoulder": (12, 13),
    "Elbow": (11, 14),
    "Wrist": (10, 15),
    "Hip": (2, 3),
    "Knee": (1, 4),
    "Ankle": (0, 5),
}

# The 20 top-level MPII activity categories (alphabetical) plus a bucket for
# images the dataset leaves uncategorised.
ACTIVITY_NAMES = (
    "bicycling", "conditioning exercise", "dancing", "fishing and hunting",
    "home activities", "home repair", "inactivity quiet/light", "lawn and garden",
    "miscellaneous", "music playing", "occupation", "religious activities",
    "running", "self care", "sports", "transportation", "volunteer activities",
    "walking", "water activities", "winter activities", "uncategorised",
)
NUM_ACTIVITIES = len(ACTIVITY_NAMES)

SKELETON_EDGES = (
    (0, 1), (1, 2), (2, 6), (6, 3), (3, 4), (4, 5),
    (6, 7), (7, 8), (8, 9),
    (10, 11), (11, 12), (12, 7), (7, 13), (13, 14), (14, 15),
)
