import os

# 项目根目录 (config.py 与 run.py 在同一目录)
BASE_DIR = os.path.abspath(os.path.dirname(__file__))

# 信号处理默认参数: 16 kHz, 32ms 窗长, 16ms 帧移
SAMPLE_RATE_HZ = 16000
WINDOW_LEN_SAMPLES = 512
HOP_LEN_SAMPLES = 256
SOUND_SPEED_M_PER_S = 343.0

# 复数掩码幅度上限 (10 即 20 dB 增益)
MASK_CLIP = 10.0

# MVDR 求逆前的对角加载系数 (相对于 trace(Φn)/I)
DIAGONAL_LOADING = 1e-6

# 阵列几何文件 (JSON)。为 None 时使用内置的 15 麦克风、4 cm 间距线阵
DEFAULT_GEOMETRY_PATH = None

# 输出 WAV 位深: 32 (IEEE float) 或 16 (PCM)
OUTPUT_BIT_DEPTH = 32

# 并行处理场景时的默认线程数
DEFAULT_JOBS = 1

# SQLite 数据库, 用于保存运行清单和指标记录
SQLALCHEMY_DATABASE_URI = 'sqlite:///' + os.path.join(BASE_DIR, 'separation_runs.db')
SQLALCHEMY_TRACK_MODIFICATIONS = False

# 日志配置
LOG_FILE = os.path.join(BASE_DIR, 'app.log')
LOG_LEVEL = 'WARNING' # 选项: DEBUG, INFO, WARNING, ERROR, CRITICAL

# 分页
RUNS_PER_PAGE = 20 # 运行列表 API 每页返回的数量
