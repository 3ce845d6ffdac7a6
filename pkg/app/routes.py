from flask import Blueprint, request, jsonify, current_app
from app.extensions import db
from app.models import Run

bp = Blueprint('runs', __name__)


def _get_run_or_404(run_id: int):
    run = db.session.get(Run, run_id)
    if run is None:
        current_app.logger.warning(f"API 请求的运行 {run_id} 不存在。")
    return run


@bp.route('/api/runs')
def api_runs():
    """
    分页返回运行清单, 最新的在前。可用 ?command= 过滤。
    """
    page = request.args.get('page', 1, type=int)
    per_page = request.args.get('per_page', current_app.config.get('RUNS_PER_PAGE', 20), type=int)
    command = request.args.get('command')

    base_query = Run.query
    if command:
        base_query = base_query.filter_by(command=command)
    pagination = base_query.order_by(Run.id.desc())\
                           .paginate(page=page, per_page=per_page, error_out=False)

    return jsonify({
        'runs': [run.to_dict(include_metrics=False) for run in pagination.items],
        'has_next': pagination.has_next,
        'next_page': pagination.next_num,
        'current_page': pagination.page,
        'total_pages': pagination.pages,
        'total_runs': pagination.total
    })


@bp.route('/api/runs/<int:run_id>')
def api_run(run_id):
    run = _get_run_or_404(run_id)
    if run is None:
        return jsonify({'error': '运行未找到'}), 404
    return jsonify(run.to_dict())


@bp.route('/api/runs/<int:run_id>/metrics')
def api_run_metrics(run_id):
    run = _get_run_or_404(run_id)
    if run is None:
        return jsonify({'error': '运行未找到'}), 404
    return jsonify({'run_id': run.id, 'metrics': [m.to_dict() for m in run.metrics]})
