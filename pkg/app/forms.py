from flask_wtf import FlaskForm
from flask_wtf.file import FileAllowed, FileField, FileRequired
from wtforms import IntegerField, StringField
from wtforms.validators import DataRequired, InputRequired, NumberRange

IMAGE_EXTENSIONS = ['png', 'jpg', 'jpeg']


class InferenceForm(FlaskForm):
    """Point cloud, image and affordance text for one prediction"""
    points = FileField(
        'Point file',
        validators=[
            FileRequired(),
            FileAllowed(['txt', 'xyz'], 'Text point files only!')
        ]
    )
    image = FileField(
        'Interaction image',
        validators=[
            FileRequired(),
            FileAllowed(IMAGE_EXTENSIONS, 'PNG or JPEG images only!')
        ]
    )
    text = StringField('Affordance', validators=[DataRequired()])
    category = StringField('Category')


class AttentionForm(FlaskForm):
    """Image, text and the word/level whose cross-attention to export"""
    image = FileField(
        'Image',
        validators=[
            FileRequired(),
            FileAllowed(IMAGE_EXTENSIONS, 'PNG or JPEG images only!')
        ]
    )
    text = StringField('Text', validators=[DataRequired()])
    word = IntegerField('Word index', validators=[InputRequired(), NumberRange(min=0)])
    level = IntegerField('Pyramid level', validators=[InputRequired(), NumberRange(min=0)])
