import logging

from flask import Blueprint, current_app, jsonify

from dag.errors import DagError
from .forms import AttentionForm, InferenceForm

logger = logging.getLogger(__name__)

main_bp = Blueprint('main', __name__)


def get_service():
    return current_app.extensions['inference_service']


def form_errors(form):
    return jsonify({'success': False, 'error': 'Invalid request.', 'fields': form.errors}), 400


@main_bp.route('/health', methods=['GET'])
def health():
    return jsonify({'success': True, **get_service().status()})


@main_bp.route('/infer', methods=['POST'])
def infer():
    """Per-point affordance mask for an uploaded cloud, image and text"""
    form = InferenceForm()
    if not form.validate_on_submit():
        return form_errors(form)
    try:
        result = get_service().predict(form.points.data, form.image.data, form.text.data, form.category.data)
        return jsonify({'success': True, **result})
    except DagError as e:
        logger.error(f"Inference error: {str(e)}")
        return jsonify({'success': False, 'error': str(e)}), 400 if e.exit_code != 3 else 503


@main_bp.route('/attention', methods=['POST'])
def attention():
    """Cross-attention heatmap of one word at one pyramid level"""
    form = AttentionForm()
    if not form.validate_on_submit():
        return form_errors(form)
    try:
        result = get_service().attention(form.image.data, form.text.data, form.word.data, form.level.data)
        return jsonify({'success': True, **result})
    except DagError as e:
        logger.error(f"Attention export error: {str(e)}")
        return jsonify({'success': False, 'error': str(e)}), 400 if e.exit_code != 3 else 503
